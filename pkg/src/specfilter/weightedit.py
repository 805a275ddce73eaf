"""Fold a suppression operator into FFN down-projection weights.

For a down-projection stored as ``(d, d_ff)`` ("rows" orientation, the usual
``nn.Linear(d_ff, d)`` layout) the corrected weight is ``P @ W``; when it is
stored transposed as ``(d_ff, d)`` ("cols") it is ``W @ P``, which is the same
map because ``P`` is symmetric.  Products are formed in float64 and rounded
once, to nearest-even, back to the stored dtype.  The output bias is left
alone unless asked for.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import ml_dtypes
import numpy as np

from .spectral import SuppressionOperator
from .tensorstore import CheckpointHandle, Tensor, open_safetensors, write_safetensors

__all__ = [
    "DEFAULT_TEMPLATE",
    "DEFAULT_LAYERS",
    "LayerSelection",
    "LayerEdit",
    "EditReport",
    "parse_layers",
    "resolve_layers",
    "correct_weight",
    "round_to_dtype",
    "rounding_bound",
    "edit_checkpoint",
    "verify_edit",
]

log = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "model.layers.{layer}.mlp.down_proj.weight"
# deeper half of a 32-layer model, 0-based checkpoint numbering
DEFAULT_LAYERS = tuple(range(16, 32))
ORIENTATIONS = ("model_dim_rows", "model_dim_cols")
_ORIENTATION_ALIASES = {"rows": "model_dim_rows", "cols": "model_dim_cols"}


class EditError(ValueError):
    pass


class MissingLayer(EditError):
    def __init__(self, layers: Iterable[int], names: Iterable[str] = ()):
        self.layers = sorted(layers)
        self.names = list(names)
        super().__init__(f"layers {self.layers} not found in checkpoint: {self.names}")


class DimMismatch(EditError):
    pass


class NonFloatTensor(EditError):
    pass


def normalize_orientation(orientation: str) -> str:
    orientation = _ORIENTATION_ALIASES.get(orientation, orientation)
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS} (or rows/cols), got {orientation!r}")
    return orientation


def parse_layers(text: str) -> list[int]:
    """``"16-19,24"`` -> ``[16, 17, 18, 19, 24]`` (ranges are inclusive)."""
    out: set[int] = set()
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        m = re.fullmatch(r"(\d+)\s*-\s*(\d+)", part)
        if m:
            lo, hi = int(m.group(1)), int(m.group(2))
            if hi < lo:
                raise ValueError(f"empty layer range {part!r}")
            out.update(range(lo, hi + 1))
        elif re.fullmatch(r"\d+", part):
            out.add(int(part))
        else:
            raise ValueError(f"bad layer spec {part!r}")
    if not out:
        raise ValueError(f"no layers in {text!r}")
    return sorted(out)


@dataclass
class LayerSelection:
    indices: tuple[int, ...] = DEFAULT_LAYERS
    name_template: str = DEFAULT_TEMPLATE
    orientation: str = "model_dim_rows"
    include_bias: bool = False

    def __post_init__(self) -> None:
        self.indices = tuple(sorted(set(int(i) for i in self.indices)))
        if not self.indices:
            raise ValueError("layer selection is empty")
        if "{layer}" not in self.name_template:
            raise ValueError("name_template needs a '{layer}' placeholder")
        self.orientation = normalize_orientation(self.orientation)

    def name(self, layer: int) -> str:
        return self.name_template.format(layer=layer)

    def bias_name(self, layer: int) -> str:
        name = self.name(layer)
        return name[: -len(".weight")] + ".bias" if name.endswith(".weight") else name + ".bias"


def resolve_layers(handle: CheckpointHandle, selection: LayerSelection) -> list[str]:
    missing = [i for i in selection.indices if selection.name(i) not in handle]
    if missing:
        raise MissingLayer(missing, [selection.name(i) for i in missing])
    return [selection.name(i) for i in selection.indices]


# ---------------------------------------------------------------------------
# rounding

_ROUND_DTYPES = {
    "f16": (np.float16, 11, -14),
    "bf16": (ml_dtypes.bfloat16, 8, -126),
    "f32": (np.float32, 24, -126),
    "f64": (np.float64, 53, -1022),
}


def _to_f32_round_odd(x: np.ndarray) -> np.ndarray:
    # truncate toward zero, then set the low bit if anything was dropped
    f32 = x.astype(np.float32)
    back = f32.astype(np.float64)
    overshoot = np.abs(back) > np.abs(x)
    f32 = np.where(overshoot, np.nextafter(f32, np.float32(0)), f32)
    inexact = f32.astype(np.float64) != x
    bits = f32.view(np.uint32) | inexact.astype(np.uint32)
    return bits.view(np.float32)


def round_to_dtype(values: np.ndarray, dtype: str) -> np.ndarray:
    """Round float64 values to ``dtype`` (nearest, ties to even) in one step.

    ml_dtypes converts float64 to bfloat16 through float32, which rounds
    twice; rounding to odd on the way to float32 makes that exact.
    """
    try:
        target = _ROUND_DTYPES[dtype][0]
    except KeyError:
        raise NonFloatTensor(f"cannot round to non-float dtype {dtype}") from None
    x = np.asarray(values, dtype=np.float64)
    if dtype == "bf16":
        with np.errstate(over="ignore"):
            return _to_f32_round_odd(x).astype(target)
    return x.astype(target)


def rounding_bound(values: np.ndarray, dtype: str) -> np.ndarray:
    """Half an ulp of ``dtype`` at each of ``values``: the most a correctly
    rounded conversion can move them."""
    _, precision, emin = _ROUND_DTYPES[dtype]
    mag = np.abs(np.asarray(values, dtype=np.float64))
    with np.errstate(divide="ignore"):
        exp = np.floor(np.log2(np.where(mag > 0, mag, 1.0)))
    exp = np.maximum(np.where(mag > 0, exp, emin), emin)
    return np.ldexp(0.5, (exp - (precision - 1)).astype(int))


def _model_axis(orientation: str) -> int:
    return 0 if orientation == "model_dim_rows" else 1


def _exact_product(w: np.ndarray, p: np.ndarray, orientation: str) -> np.ndarray:
    return p @ w if orientation == "model_dim_rows" else w @ p


def correct_weight(
    weight: Tensor, op: SuppressionOperator, orientation: str = "model_dim_rows"
) -> Tensor:
    """Apply ``op`` on the model-dimension axis of a 2-D weight."""
    if not weight.is_float:
        raise NonFloatTensor(f"cannot edit {weight.dtype} tensor")
    if not op.foldable:
        raise EditError(f"{op.kind} operator acts on representations and cannot be folded into weights")
    orientation = normalize_orientation(orientation)
    if len(weight.shape) != 2:
        raise DimMismatch(f"expected a 2-D weight, got shape {weight.shape}")
    axis = _model_axis(orientation)
    if weight.shape[axis] != op.dim:
        raise DimMismatch(
            f"weight {weight.shape} has {weight.shape[axis]} on the model axis ({orientation}), operator is {op.dim}"
        )
    if np.array_equal(op.matrix, np.eye(op.dim)):
        return weight  # keeps -0.0 and NaN payloads bit-exact
    exact = _exact_product(weight.as_f64(), op.matrix, orientation)
    return Tensor(round_to_dtype(exact, weight.dtype))


def correct_bias(bias: Tensor, op: SuppressionOperator) -> Tensor:
    if not bias.is_float:
        raise NonFloatTensor(f"cannot edit {bias.dtype} tensor")
    if bias.shape != (op.dim,):
        raise DimMismatch(f"bias {bias.shape} does not match operator dim {op.dim}")
    return Tensor(round_to_dtype(op.matrix @ bias.as_f64(), bias.dtype))


# ---------------------------------------------------------------------------
# checkpoint editing


@dataclass
class LayerEdit:
    layer: int
    name: str
    shape: list[int]
    dtype: str
    max_abs_delta: float
    rel_frobenius_delta: float
    rounding_error: float
    operator_checksum: str
    alpha: float | None = None
    lambda1: float | None = None


@dataclass
class EditReport:
    layers: list[LayerEdit] = field(default_factory=list)
    kind: str = ""
    alpha: float | None = None
    eta: float | None = None
    lambda1: float | None = None
    operator_checksum: str | None = None
    orientation: str = "model_dim_rows"
    edited_biases: list[str] = field(default_factory=list)
    schema_version: int = 1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _operator_for(ops: SuppressionOperator | Mapping[int, SuppressionOperator], layer: int) -> SuppressionOperator:
    if isinstance(ops, SuppressionOperator):
        return ops
    try:
        return ops[layer]
    except KeyError:
        raise EditError(f"no operator supplied for layer {layer}") from None


def _shared(values: list):
    return values[0] if values and all(v == values[0] for v in values) else None


def edit_checkpoint(
    src: CheckpointHandle | str | Path,
    dst_path: str | Path,
    ops: SuppressionOperator | Mapping[int, SuppressionOperator],
    selection: LayerSelection,
) -> EditReport:
    """Write a copy of ``src`` to ``dst_path`` with the selected
    down-projections corrected.

    ``ops`` is one operator shared by every layer or a ``{layer: operator}``
    map.  All other tensors and the metadata are copied byte for byte.
    Nothing is written if any layer fails.
    """
    handle = src if isinstance(src, CheckpointHandle) else open_safetensors(src)
    if Path(dst_path).resolve() == Path(handle.path).resolve():
        raise EditError("destination must differ from the source checkpoint")
    names = resolve_layers(handle, selection)
    by_name = dict(zip(names, selection.indices))
    bias_names = {}
    if selection.include_bias:
        missing = [i for i in selection.indices if selection.bias_name(i) not in handle]
        if missing:
            raise MissingLayer(missing, [selection.bias_name(i) for i in missing])
        bias_names = {selection.bias_name(i): i for i in selection.indices}

    report = EditReport(orientation=selection.orientation)
    used: list[SuppressionOperator] = []
    replaced: dict[str, Tensor] = {}
    for name, layer in by_name.items():
        op = _operator_for(ops, layer)
        used.append(op)
        w = handle.read_tensor(name)
        new = correct_weight(w, op, selection.orientation)
        exact = _exact_product(w.as_f64(), op.matrix, selection.orientation)
        delta = new.as_f64() - w.as_f64()
        norm = np.linalg.norm(w.as_f64())
        report.layers.append(
            LayerEdit(
                layer=layer,
                name=name,
                shape=list(w.shape),
                dtype=w.dtype,
                max_abs_delta=float(np.max(np.abs(delta), initial=0.0)),
                rel_frobenius_delta=float(np.linalg.norm(delta) / norm) if norm > 0 else 0.0,
                rounding_error=float(np.max(np.abs(new.as_f64() - exact), initial=0.0)),
                operator_checksum=op.checksum(),
                alpha=op.alpha,
                lambda1=op.lambda1,
            )
        )
        replaced[name] = new
        log.info("layer %d: %s %s rel-delta %.3e", layer, name, w.shape, report.layers[-1].rel_frobenius_delta)
    for bname, layer in bias_names.items():
        replaced[bname] = correct_bias(handle.read_tensor(bname), _operator_for(ops, layer))
        report.edited_biases.append(bname)

    report.kind = _shared([op.kind for op in used]) or "mixed"
    report.alpha = _shared([op.alpha for op in used])
    report.eta = _shared([op.eta for op in used])
    report.lambda1 = _shared([op.lambda1 for op in used])
    report.operator_checksum = _shared([op.checksum() for op in used])

    out = [(name, replaced[name] if name in replaced else handle.lazy(name)) for name in handle.names()]
    write_safetensors(dst_path, out, handle.metadata)
    return report


def verify_edit(
    src: CheckpointHandle,
    dst: CheckpointHandle,
    ops: SuppressionOperator | Mapping[int, SuppressionOperator],
    selection: LayerSelection,
    tol: float = 0.0,
) -> dict:
    """Check ``dst`` against ``ops`` applied to ``src``.

    Targets must satisfy ``|W_dst - P W_src| <= tol + half-ulp`` elementwise;
    every other tensor must be byte-identical.  Failures are reported, not
    raised.
    """
    entries: list[dict] = []
    targets = {selection.name(i): i for i in selection.indices}
    if selection.include_bias:
        targets.update({selection.bias_name(i): i for i in selection.indices})

    for name in sorted(set(src.names()) | set(dst.names())):
        entry = {"name": name, "target": name in targets}
        if name not in src or name not in dst:
            entry.update(ok=False, reason="missing in " + ("dst" if name in src else "src"))
        elif src.info(name).shape != dst.info(name).shape or src.info(name).dtype != dst.info(name).dtype:
            entry.update(ok=False, reason="shape or dtype changed")
        elif name in targets:
            layer = targets[name]
            op = _operator_for(ops, layer)
            w_src, w_dst = src.read_tensor(name), dst.read_tensor(name)
            try:
                if len(w_src.shape) == 1:
                    exact = op.matrix @ w_src.as_f64()
                else:
                    axis = _model_axis(selection.orientation)
                    if w_src.shape[axis] != op.dim:
                        raise DimMismatch(f"{name}: model axis {w_src.shape[axis]} != operator {op.dim}")
                    exact = _exact_product(w_src.as_f64(), op.matrix, selection.orientation)
            except DimMismatch as exc:
                entry.update(ok=False, reason=str(exc))
            else:
                err = np.abs(w_dst.as_f64() - exact)
                allowed = tol + rounding_bound(exact, w_dst.dtype)
                entry.update(
                    ok=bool(np.all(err <= allowed)),
                    max_abs_error=float(np.max(err, initial=0.0)),
                    layer=layer,
                )
                if not entry["ok"]:
                    entry["reason"] = "weights differ from operator applied to source"
        else:
            same = src.read_bytes(name) == dst.read_bytes(name)
            entry.update(ok=same)
            if not same:
                entry["reason"] = "non-target tensor modified"
        entries.append(entry)

    meta_ok = (src.metadata or None) == (dst.metadata or None)
    failed = [e["name"] for e in entries if not e["ok"]]
    return {
        "schema_version": 1,
        "passed": not failed and meta_ok,
        "metadata_ok": meta_ok,
        "failed": failed,
        "tol": tol,
        "tensors": entries,
    }

