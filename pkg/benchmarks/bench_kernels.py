"""Time every hot kernel on its numba and numpy paths at desk-scale shapes.

    python benchmarks/bench_kernels.py [--repeat N] [--step]

``--step`` also times one full training step per path by re-running this
script in a subprocess with ``MOEXTEND_NUMBA`` set accordingly.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from moextend import _kernels as K


def cases(rng: np.random.Generator):
    tokens, d, h, m = 16 * 13, 64, 256, 4
    x = rng.normal(size=(tokens, h))
    probs = rng.random((tokens, m))
    rows = rng.integers(0, tokens, tokens)
    src = rng.normal(size=(tokens, d))
    ln = rng.normal(size=(tokens, d))
    xhat, rstd = K.np_layernorm_fwd(ln, 1e-5)
    p = rng.normal(size=(d, h))
    g = rng.normal(size=(d, h))
    wr = rng.normal(size=(d, m + 1))
    return {
        "gelu_tanh": lambda f: f(x),
        "gelu_tanh_grad": lambda f: f(x),
        "topk_rows": lambda f: f(probs, 2),
        "index_add_rows": lambda f: f(np.zeros((tokens, d)), rows, src),
        "count_selections": lambda f: f(K.np_topk_rows(probs, 2), m),
        "ordered_matmul": lambda f: f(src, wr),
        "layernorm_fwd": lambda f: f(ln, 1e-5),
        "layernorm_bwd": lambda f: f(ln, xhat, rstd),
        "adamw_update": lambda f: f(p.copy(), g, np.zeros_like(p), np.zeros_like(p), 1e-3, 0.9, 0.999, 0.1, 0.001, 1e-8, 0.0),
    }


def bench_kernels(repeat: int) -> None:
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, call in cases(rng).items():
        fnp, fnb = getattr(K, "np_" + name), getattr(K, "nb_" + name, None)
        t_np = min(timeit.repeat(lambda: call(fnp), number=20, repeat=repeat)) / 20 * 1e6
        if fnb is None or not K.HAVE_NUMBA:
            print(f"{name:<18}{t_np:>12.1f}{'n/a':>12}")
            continue
        call(fnb)  # compile
        t_nb = min(timeit.repeat(lambda: call(fnb), number=20, repeat=repeat)) / 20 * 1e6
        print(f"{name:<18}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>9.2f}x")


def time_step(repeat: int) -> float:
    from moextend.config import RunConfig, TrainConfig
    from moextend.data import Vocab, gen_task_a
    from moextend.model import Model
    from moextend.training import train_loop

    cfg = RunConfig()
    cfg.model.vocab_size = Vocab.from_config(cfg.data).size
    data = gen_task_a(0, 256, cfg.data)
    model = Model(cfg.model, seed=0)
    model.set_trainable(True)
    train_loop(model, data, TrainConfig(steps=3, batch_size=16), "pretrain")  # warm-up and compile
    rep = train_loop(model, data, TrainConfig(steps=10 * repeat, batch_size=16), "pretrain")
    return rep.wall_time / len(rep.steps)


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--step", action="store_true")
    ap.add_argument("--step-only", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.step_only:
        print(f"{time_step(args.repeat):.6f}")
        return
    bench_kernels(args.repeat)
    if args.step:
        for flag in ("0", "1"):
            env = {**os.environ, "MOEXTEND_NUMBA": flag}
            out = subprocess.run([sys.executable, __file__, "--step-only", "--repeat", str(args.repeat)],
                                 env=env, capture_output=True, text=True, check=True).stdout.split()[-1]
            label = "numba" if flag == "1" else "numpy"
            print(f"train step ({label} path, B=16): {float(out) * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
