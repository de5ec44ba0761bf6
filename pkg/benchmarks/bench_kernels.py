"""Time the numba kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--hidden 200] [--frames 16] [--repeat 50]

Reports per-call milliseconds for the LSTM forward and backward kernels, the
Adam update, and one full ``loss_and_grad`` on a segment. Numba timings
exclude compilation (one warm-up call per kernel).
"""
import argparse
import json
import timeit

import numpy as np

from atlbp import kernels
from atlbp import model as mdl


def _time(fn, repeat):
    fn()  # warm-up / jit
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def bench(hidden, frames, repeat, seed=0):
    if kernels.numba_kernels is None:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(seed)
    H, T = hidden, frames
    xw = rng.normal(size=(T, 4 * H))
    U = rng.normal(scale=0.1, size=(4 * H, H))
    h0, c0 = np.zeros(H), np.zeros(H)
    dh = rng.normal(size=(T, H))
    n = 4 * H * H
    p, g = rng.normal(size=n), rng.normal(size=n)

    cfg = mdl.ModelConfig(dim_rho=256, dim_xi=128, hidden_units=H)
    params = mdl.init_params(cfg, np.random.default_rng(seed))
    seg = type("Seg", (), dict(psi=rng.normal(size=(T, cfg.dim_psi)), rho=rng.normal(size=(T, 256)),
                               xi=rng.normal(size=(T, 128)), label=3))()

    rows = {}
    for ns in (kernels.numpy_kernels, kernels.numba_kernels):
        hs, cs, acts = ns.lstm_forward(xw, U, h0, c0)
        m, v = np.zeros(n), np.zeros(n)
        row = {
            "lstm_forward": _time(lambda: ns.lstm_forward(xw, U, h0, c0), repeat),
            "lstm_backward": _time(lambda: ns.lstm_backward(dh, hs, cs, acts, U, h0, c0), repeat),
            "adam_update": _time(lambda: ns.adam_update(p.copy(), g, m, v, 1e-3, 0.9, 0.999, 1e-8, 0.1, 0.001),
                                 repeat),
        }
        saved = kernels.active
        kernels.active = ns
        try:
            row["loss_and_grad"] = _time(lambda: mdl.loss_and_grad(params, seg), repeat)
        finally:
            kernels.active = saved
        rows[ns.name] = row
    rows["speedup"] = {k: rows["numpy"][k] / rows["numba"][k] for k in rows["numpy"]}
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--hidden", type=int, default=200)
    ap.add_argument("--frames", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--json", action="store_true", help="print raw JSON")
    a = ap.parse_args()
    rows = bench(a.hidden, a.frames, a.repeat)
    if a.json:
        print(json.dumps(rows, indent=1))
        return
    print(f"H={a.hidden} T={a.frames}  (ms per call, best of {a.repeat})")
    print(f"{'kernel':<15}{'numpy':>10}{'numba':>10}{'speedup':>10}")
    for k in rows["numpy"]:
        print(f"{k:<15}{rows['numpy'][k]:>10.3f}{rows['numba'][k]:>10.3f}{rows['speedup'][k]:>9.1f}x")


if __name__ == "__main__":
    main()
