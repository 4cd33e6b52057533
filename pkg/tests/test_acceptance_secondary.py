"""Secondary acceptance (criterion 12): service + UI.

Needs the trained main model (same artifacts directory as the primary
suite) and a node toolchain for the browser-side slider-storm test.
"""

import json
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

import acceptance_artifacts as art
from hyperreg import hyperopt, service

FRONTEND = Path(__file__).resolve().parent.parent / "frontend"


def report(ok, detail):
    line = f"[criterion 12] {'PASS' if ok else 'FAIL'}  {detail}"
    print(line, file=sys.stderr)
    assert ok, line


@pytest.fixture(scope="module")
def dataset():
    return art.ensure_dataset()


@pytest.fixture(scope="module")
def main_model():
    path = art.model_path(art.DEFAULT_ROOT, "hm_main")
    if not path.exists():
        art.build_all(art.DEFAULT_ROOT, until="hm_main")
    return art.load_model("hm_main")


@pytest.fixture(scope="module")
def client(main_model, dataset):
    return TestClient(service.make_app(main_model, dataset))


def test_register_latency_under_200ms(client):
    info = client.get("/api/info").json()
    pid = info["pairs"][0]["id"]
    client.post("/api/register", json={"pair_id": pid, "lambda": 0.5})  # warm caches
    latencies = []
    for i in range(30):
        lam = 0.05 + 0.9 * (i / 29.0)
        resp = client.post("/api/register", json={"pair_id": pid, "lambda": lam}).json()
        latencies.append(resp["latency_ms"])
    median = float(np.median(latencies))
    report(median < 200.0, f"register median latency {median:.0f} ms (< 200 ms at 64x64)")


def test_api_values_equal_cli_sweep(client, main_model, dataset):
    info = client.get("/api/info").json()
    pairs = [p for p in info["pairs"] if p["split"] == "val"][:3]
    label_set = tuple(range(1, dataset.n_labels))
    worst = 0.0
    for lam in (0.2, 0.5, 0.8):
        for p in pairs:
            api = client.post("/api/register",
                              json={"pair_id": p["id"], "lambda": lam}).json()
            row = hyperopt.sweep(main_model, [{"lambda": lam}], dataset,
                                 [(p["moving"], p["fixed"])], label_set)[0]
            worst = max(worst,
                        abs(api["metrics"]["dice_mean"] - row["dice_mean"]),
                        abs(api["metrics"]["jacobian_sd"] - row["jac_sd_mean"]))
    report(worst == 0.0, f"API vs CLI sweep dice/jacSD max |delta| = {worst} (exact)")


def test_lambda1_regularity_for_trained_model(client):
    info = client.get("/api/info").json()
    vals = []
    for p in info["pairs"][:5]:
        resp = client.post("/api/register", json={"pair_id": p["id"], "lambda": 1.0}).json()
        vals.append(resp["metrics"]["jacobian_sd"])
    worst = max(vals)
    report(worst < 0.02, f"lambda=1 jacobian SD over 5 pairs: max {worst:.4f} (< 0.02)")


def test_tune_stream_matches_direct_auto_tune(client, main_model, dataset):
    info = client.get("/api/info").json()
    val_pairs = [p for p in info["pairs"] if p["split"] == "val"]
    ids = [p["id"] for p in val_pairs[:4]]
    resp = client.post("/api/tune", json={"pair_ids": ids, "seed": 3, "max_iters": 40})
    assert resp.status_code == 200
    events = [l for l in resp.text.splitlines() if l.startswith("event:")]
    datas = [json.loads(l[len("data: "):]) for l in resp.text.splitlines()
             if l.startswith("data:")]
    assert events[-1] == "event: done"
    pairs = [(p["moving"], p["fixed"]) for p in val_pairs[:4]]
    direct = hyperopt.auto_tune(main_model, dataset, pairs, seed=3, max_iters=40)
    delta = abs(datas[-1]["hp_star"]["lambda"] - direct.hp_star["lambda"])
    steps = len(datas) - 1
    report(delta == 0.0 and steps == len(direct.trajectory),
           f"tune stream final lambda* identical to direct call (delta {delta}), "
           f"{steps} streamed iterations")


def test_ui_slider_storm_suite():
    npx = shutil.which("npx")
    if npx is None:
        pytest.skip("node toolchain unavailable")
    if not (FRONTEND / "node_modules").exists():
        subprocess.run(["npm", "install", "--no-audit", "--no-fund"], cwd=FRONTEND,
                       check=True, capture_output=True)
    proc = subprocess.run([npx, "vitest", "run"], cwd=FRONTEND,
                          capture_output=True, text=True, timeout=600)
    ok = proc.returncode == 0
    tail = (proc.stdout + proc.stderr).strip().splitlines()[-3:]
    report(ok, "frontend vitest (debounce/stale-discard slider storm): "
               + " | ".join(tail))
