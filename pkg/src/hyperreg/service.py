"""HTTP inference service for interactive hyperparameter exploration.

One process serves one checkpoint over one dataset. All endpoints are pure
functions of (checkpoint, dataset, request); the checkpoint is never
mutated. The tune endpoint streams its trajectory as server-sent events.
"""

from __future__ import annotations

import base64
import io
import json
import threading
import time

import numpy as np
from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, StreamingResponse

from . import data as datamod
from . import eval as evalmod
from . import hyperopt
from .fields import identity_grid, jacobian_sd, warp, warp_labels_nearest
from .nets import hypermorph_forward
from .training import TrainConfig


def _png_b64(image):
    from PIL import Image

    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    img = Image.fromarray((arr * 255.0).round().astype(np.uint8), mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _labels_png_b64(labels, n_labels):
    """Palette-colored label map for the UI's label-overlay mode."""
    from PIL import Image

    img = Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="P")
    rng = np.random.default_rng(7)
    palette = [0, 0, 0]
    for _ in range(max(n_labels - 1, 1)):
        palette.extend(int(x) for x in rng.integers(60, 255, 3))
    palette.extend([0] * (768 - len(palette)))
    img.putpalette(palette)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _grid_polylines(disp, stride=4, step=2):
    """Deformed grid lines: every `stride`-th row/column of phi, decimated."""
    h, w, _ = disp.shape
    phi = identity_grid(h, w) + disp
    lines = []
    for r in range(0, h, stride):
        pts = phi[r, ::step]
        lines.append([[round(float(p[0]), 2), round(float(p[1]), 2)] for p in pts])
    for c in range(0, w, stride):
        pts = phi[::step, c]
        lines.append([[round(float(p[0]), 2), round(float(p[1]), 2)] for p in pts])
    return lines


def _error(status, message):
    return JSONResponse(status_code=status, content={"error": message})


def make_app(ckpt, dataset):
    config = TrainConfig.from_json(ckpt.train_config)
    loss = config.loss
    app = FastAPI(title="hyperreg")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])
    state = {"ready": True, "tune_lock": threading.Lock()}
    app.state.hyperreg = state

    pair_list = []
    for split in ("val", "test"):
        for i, (m, f) in enumerate(dataset.make_pairs(split, 10, seed=41)):
            pair_list.append({"id": f"{split[0]}{i:02d}", "moving": m, "fixed": f, "split": split})
    pairs_by_id = {p["id"]: p for p in pair_list}

    def hyper_spec():
        out = []
        for name in loss.active_names:
            spec = {"name": name, "range": [0.0, 1.0], "discrete": False}
            if name == "window":
                spec.update(discrete=True, values=list(loss.window_values))
            elif name == "bins":
                spec.update(discrete=True, values=list(loss.bins_values))
            out.append(spec)
        return out

    def parse_point(body):
        point = {"lambda": body.get("lambda")}
        if point["lambda"] is None:
            raise ValueError("lambda is required")
        for key in ("gamma", "window", "bins"):
            if body.get(key) is not None:
                point[key] = body[key]
        vec = hyperopt._grid_point_to_vec(point, loss)
        if np.any(vec < 0.0) or np.any(vec > 1.0):
            raise ValueError(f"hyperparameters out of range: {point}")
        return point

    @app.get("/api/info")
    def info():
        if not state["ready"]:
            return _error(503, "model still loading")
        return {
            "model": {
                "descriptor": ckpt.descriptor.to_json(),
                "metric": loss.sim_metric,
                "steps_trained": ckpt.loss_summary.get("steps"),
            },
            "hyperparameters": hyper_spec(),
            "pairs": pair_list,
            "dataset": {
                "n_labels": dataset.n_labels,
                "shape": list(dataset.shape),
                "train_labels": list(dataset.train_labels),
                "held_out_labels": list(dataset.held_out_labels),
            },
        }

    @app.post("/api/register")
    async def register(request: Request):
        if not state["ready"]:
            return _error(503, "model still loading")
        t0 = time.perf_counter()
        body = await request.json()
        pair = pairs_by_id.get(body.get("pair_id"))
        if pair is None:
            return _error(404, f"unknown pair id {body.get('pair_id')!r}")
        try:
            point = parse_point(body)
        except ValueError as err:
            return _error(400, str(err))
        moving = dataset[pair["moving"]]
        fixed = dataset[pair["fixed"]]
        vec = hyperopt._grid_point_to_vec(point, loss)
        _, u = hypermorph_forward(ckpt.weights, vec, moving.image, fixed.image,
                                  ckpt.descriptor)
        u = u.astype(np.float64)
        warped = warp(moving.image, u)
        label_set = tuple(range(1, dataset.n_labels))
        warped_labels = warp_labels_nearest(moving.labels, u)
        per_label, mean_dice = evalmod.dice(warped_labels, fixed.labels, label_set)
        # full precision: these figures must equal the CLI sweep's exactly
        metrics = {
            "dice_mean": mean_dice,
            "dice_per_label": {str(k): v for k, v in per_label.items()},
            "jacobian_sd": jacobian_sd(u),
        }
        return {
            "pair_id": pair["id"],
            "point": point,
            "warped_png": _png_b64(warped),
            "difference_png": _png_b64(np.abs(warped - fixed.image)),
            "moving_png": _png_b64(moving.image),
            "fixed_png": _png_b64(fixed.image),
            "warped_labels_png": _labels_png_b64(warped_labels, dataset.n_labels),
            "grid_polylines": _grid_polylines(u),
            "metrics": metrics,
            "latency_ms": round((time.perf_counter() - t0) * 1000.0, 2),
        }

    @app.post("/api/tune")
    async def tune(request: Request):
        body = await request.json()
        ids = body.get("pair_ids") or [p["id"] for p in pair_list if p["split"] == "val"]
        unknown = [i for i in ids if i not in pairs_by_id]
        if unknown:
            return _error(404, f"unknown pair ids {unknown}")
        val_pairs = [(pairs_by_id[i]["moving"], pairs_by_id[i]["fixed"]) for i in ids]
        init = body.get("init")
        seed = int(body.get("seed", 0))
        max_iters = int(body.get("max_iters", hyperopt.TUNE_MAX_ITERS))
        if not state["tune_lock"].acquire(blocking=False):
            return _error(409, "a tune is already running for this session")

        def stream():
            try:
                for kind, payload in hyperopt.tune_steps(
                        ckpt, dataset, val_pairs, init=init, seed=seed, max_iters=max_iters):
                    if kind == "step":
                        it, hp, loss_val = payload
                        yield ("event: progress\ndata: "
                               + json.dumps({"iteration": it, "hp": hp,
                                             "val_loss": round(loss_val, 6)}) + "\n\n")
                    else:
                        yield ("event: done\ndata: "
                               + json.dumps({"hp_star": payload.hp_star,
                                             "converged": payload.converged,
                                             "iterations": len(payload.trajectory),
                                             "wall_time_s": round(payload.wall_time, 3)}) + "\n\n")
            finally:
                state["tune_lock"].release()

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app


def _mount_ui(app):
    """Serve the browser UI from the same origin when a build is present."""
    import os
    from pathlib import Path

    from fastapi.staticfiles import StaticFiles

    candidates = [os.environ.get("HYPERREG_UI_DIR"),
                  Path(__file__).resolve().parents[2] / "frontend"]
    for cand in candidates:
        if cand and Path(cand).joinpath("index.html").exists():
            app.mount("/", StaticFiles(directory=str(cand), html=True), name="ui")
            return str(cand)
    return None


def run_server(model_path, data_path, host="127.0.0.1", port=8080):
    import uvicorn
    from pathlib import Path

    ckpt = datamod.load_checkpoint(model_path)
    p = Path(data_path)
    dataset = datamod.Dataset(p if p.suffix == ".json" else p / "manifest.json")
    app = make_app(ckpt, dataset)
    ui = _mount_ui(app)
    print(f"serving on http://{host}:{port}  (ui: {ui or 'api only'})")
    uvicorn.run(app, host=host, port=port, log_level="warning")
