from .graph import Graph, GraphBuilder, GraphError, Run, backward, forward
from .fdcheck import fd_check, fd_check_graph
from .ops import OP_SET, ShapeMismatchError, grid_sample_array, op_set

__all__ = [
    "Graph", "GraphBuilder", "GraphError", "Run", "forward", "backward",
    "fd_check", "fd_check_graph", "OP_SET", "ShapeMismatchError",
    "grid_sample_array", "op_set",
]
