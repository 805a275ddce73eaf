"""Exercise the CLI end to end on a synthetic checkpoint: fit -> spectrum ->
edit -> verify, then tamper with one byte and verify again.

    python3 scripts/checkpoint_roundtrip.py --workdir /tmp/sf-demo
"""

import argparse
import sys
import tempfile
from pathlib import Path

import numpy as np

from specfilter import cli
from specfilter.tensorstore import Tensor, open_safetensors, write_npz, write_safetensors


def make_inputs(workdir: Path, n_layers: int, d: int, d_ff: int, n: int, seed: int) -> tuple[Path, Path]:
    rng = np.random.default_rng(seed)
    tensors = {"model.embed_tokens.weight": Tensor(rng.standard_normal((32, d)).astype(np.float32))}
    acts = {}
    for layer in range(n_layers):
        tensors[f"model.layers.{layer}.mlp.down_proj.weight"] = Tensor(
            (rng.standard_normal((d, d_ff)) / np.sqrt(d_ff)).astype(np.float32)
        )
        neg = rng.standard_normal((n, d))
        direction = rng.standard_normal(d)
        direction /= np.linalg.norm(direction)
        pos = neg + np.outer(rng.standard_normal(n) * 3.0, direction) + 0.1 * rng.standard_normal((n, d))
        acts[f"pos_L{layer}"], acts[f"neg_L{layer}"] = Tensor(pos), Tensor(neg)
    ckpt, act_path = workdir / "model.safetensors", workdir / "activations.npz"
    write_safetensors(ckpt, tensors, {"format": "pt"})
    write_npz(act_path, acts)
    return ckpt, act_path


def step(title: str, argv: list[str]) -> int:
    print(f"\n$ specfilter {' '.join(argv)}", file=sys.stderr)
    code = cli.main(argv)
    print(f"[{title}] exit {code}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--workdir", help="keep artifacts here (default: a temporary directory)")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        work = Path(a.workdir or tmp)
        work.mkdir(parents=True, exist_ok=True)
        ckpt, acts = make_inputs(work, a.layers, a.d, a.d_ff, a.n, a.seed)
        sigma, out = work / "sigma.npz", work / "edited.safetensors"
        edited = f"{a.layers // 2}-{a.layers - 1}"
        flags = ["--sigma", str(sigma), "--layers", edited, "--eta", "0.1"]

        codes = [
            step("fit", ["fit", str(acts), "--out", str(sigma)]),
            step("spectrum", ["spectrum", str(sigma), "--eta", "0.1", "--out", str(work / "spectra")]),
            step("edit", ["edit", str(ckpt), *flags, "--out", str(out)]),
            step("verify", ["verify", "--src", str(ckpt), "--dst", str(out), *flags]),
        ]
        h = open_safetensors(out)
        buf = bytearray(out.read_bytes())
        buf[h.data_start + h.info("model.embed_tokens.weight").begin] ^= 0x01
        tampered = work / "tampered.safetensors"
        tampered.write_bytes(bytes(buf))
        tamper_code = step("verify tampered", ["verify", "--src", str(ckpt), "--dst", str(tampered), *flags])

    ok = codes == [0, 0, 0, 0] and tamper_code == 1
    print(f"\nroundtrip {'ok' if ok else 'FAILED'}: steps {codes}, tampered verify exit {tamper_code}", file=sys.stderr)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
