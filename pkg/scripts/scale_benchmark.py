"""Time eigendecomposition, operator construction and the checkpoint edit at
model-like sizes (default d=512, d_ff=2048, 16 layers, float32)."""

import argparse
import resource
import sys
import tempfile
import time
import tracemalloc
from pathlib import Path

import numpy as np

from specfilter import spectral as sp
from specfilter import weightedit as we
from specfilter.covariance import hallucination_covariance
from specfilter.tensorstore import Tensor, write_safetensors


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--d", type=int, default=512)
    p.add_argument("--d-ff", type=int, default=2048)
    p.add_argument("--layers", type=int, default=16)
    p.add_argument("--samples", type=int, default=1024, help="difference vectors per layer")
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)

    rng = np.random.default_rng(a.seed)
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / "src.safetensors"
        write_safetensors(
            src,
            {
                f"model.layers.{i}.mlp.down_proj.weight": Tensor(rng.standard_normal((a.d, a.d_ff), dtype=np.float32))
                for i in range(a.layers)
            },
        )
        feats = [rng.standard_normal((a.samples, a.d)) * np.geomspace(3, 0.01, a.d) for _ in range(a.layers)]

        tracemalloc.start()
        timings = {}
        t = time.perf_counter()
        specs = [sp.eigendecompose(hallucination_covariance(x)) for x in feats]
        timings["covariance+eigh"] = time.perf_counter() - t
        t = time.perf_counter()
        ops = {i: sp.suppression_operator(s, sp.select_alpha(s.lambda1, 0.1)) for i, s in enumerate(specs)}
        timings["operators"] = time.perf_counter() - t
        t = time.perf_counter()
        we.edit_checkpoint(src, Path(tmp) / "out.safetensors", ops, we.LayerSelection(indices=range(a.layers)))
        timings["edit"] = time.perf_counter() - t
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()

    for name, sec in timings.items():
        print(f"{name:<16} {sec:8.2f} s")
    print(f"{'total':<16} {sum(timings.values()):8.2f} s")
    print(f"peak traced allocations {peak / 1024**2:.0f} MiB, max RSS {resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1024:.0f} MiB")
    return 0


if __name__ == "__main__":
    sys.exit(main())
