"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeats N] [--dtype float32|float64]

Times each kernel on shapes typical of the default toy model (4 heads,
d_head 32, a 60-token structured sample, batch 8) and then one full
forward/backward training step.
"""

import argparse
import statistics
import time

import numpy as np

from loma import kernels
from loma.model import ModelConfig, init_model
from loma.structuring import LomaParams
from loma.tokenizer import SyntheticCorpus
from loma.training import make_batch, train_step


def timeit(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1e3 * statistics.median(times)


def kernel_cases(dt, rng):
    b, h, n, d, v = 8, 4, 60, 32, 261
    scores = rng.standard_normal((b, h, n, n)).astype(dt)
    allowed = np.tri(n, dtype=np.uint8)[None]
    x = rng.standard_normal((b * n, h * d)).astype(dt)
    w = np.ones(h * d, dtype=dt)
    q = rng.standard_normal((b, h, n, d)).astype(dt)
    ang = rng.standard_normal((1, n, d // 2))
    cos, sin = np.cos(ang).astype(dt), np.sin(ang).astype(dt)
    logits = rng.standard_normal((b * n, v)).astype(dt)
    tg = rng.integers(-1, v, b * n).astype(np.int64)
    ids = rng.integers(0, v, b * n).astype(np.int64)

    def cases(k):
        probs = k.softmax_fwd(scores, allowed, 0.17)
        y, inv = k.rmsnorm_fwd(x, w, 1e-6)
        return {
            "softmax_fwd": lambda: k.softmax_fwd(scores, allowed, 0.17),
            "softmax_bwd": lambda: k.softmax_bwd(probs, scores, 0.17),
            "rmsnorm_fwd": lambda: k.rmsnorm_fwd(x, w, 1e-6),
            "rmsnorm_bwd": lambda: k.rmsnorm_bwd(x, w, inv, y),
            "rope_apply": lambda: k.rope_apply(q, cos, sin, False),
            "xent_fwd": lambda: k.xent_fwd(logits, tg),
            "embed_bwd": lambda: k.embed_bwd(ids, x, v),
        }

    return cases


def train_step_case(dtype):
    model = init_model(ModelConfig(dtype=dtype))
    batch = make_batch(SyntheticCorpus(64, 24, seed=1), LomaParams(c=2, t=4), 60, range(8))

    def run():
        model.zero_grad()
        train_step(model, batch)

    return run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--dtype", default="float32", choices=["float32", "float64"])
    args = ap.parse_args()
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels not built; showing the numpy backend only")
    cases = kernel_cases(np.dtype(args.dtype), np.random.default_rng(0))
    rows = {}
    for name in backends:
        for label, fn in cases(kernels.get_backend(name)).items():
            rows.setdefault(label, {})[name] = timeit(fn, args.repeats)
    step = train_step_case(args.dtype)
    previous = kernels.BACKEND
    for name in backends:
        kernels.use_backend(name)
        rows.setdefault("train_step", {})[name] = timeit(step, max(3, args.repeats // 4))
    kernels.use_backend(previous)

    header = f"{'kernel':<14}" + "".join(f"{b + ' ms':>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for label, t in rows.items():
        line = f"{label:<14}" + "".join(f"{t[b]:>14.3f}" for b in backends)
        if len(backends) == 2:
            line += f"{t['python'] / t['cython']:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
