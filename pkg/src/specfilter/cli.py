"""``specfilter`` command line.

Subcommands::

    fit       activation pairs (npz) -> per-layer covariance (npz + json sidecar)
    spectrum  covariance -> per-layer CSV of eigenvalue/damped/transformed + JSON
    alpha     spectrum-driven damping strength for a target retained fraction
    edit      fold the operator into a safetensors checkpoint
    verify    check an edited checkpoint against its source
    simulate  planted-mode end-to-end run on synthetic data

Exit codes: 0 ok, 1 verification/acceptance failure, 2 usage error, 3 I/O or
format error.  Every subcommand accepts ``--config FILE`` (JSON or TOML)
whose keys are the long flag names; flags given on the command line win.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import covariance as cov_mod
from . import spectral, tensorstore, testbed, weightedit
from .covariance import FeatureMatrix, HallucinationCovariance, difference_set
from .spectral import PRESETS, SuppressionOperator
from .tensorstore import Tensor

log = logging.getLogger("specfilter")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
SCHEMA_VERSION = 1


class UsageError(Exception):
    pass


class ConflictingAlphaFlags(UsageError):
    pass


class DataError(ValueError):
    """Inputs are readable but do not satisfy a subcommand's contract."""


class MissingPair(DataError):
    def __init__(self, layer):
        self.layer = layer
        super().__init__(f"activation archive has only one of pos/neg for layer {layer}")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _emit(report: dict, path: str | None) -> None:
    text = _dump(report)
    print(text)
    if path:
        Path(path).write_text(text + "\n")


# ---------------------------------------------------------------------------
# archive conventions

_MEMBER = re.compile(r"(pos|neg)(?:_L(\d+))?")


def load_activation_pairs(path: str | Path) -> dict[int | None, tuple[FeatureMatrix, FeatureMatrix]]:
    members = tensorstore.read_npz(path)
    halves: dict[int | None, dict[str, np.ndarray]] = {}
    for name, tensor in members.items():
        m = _MEMBER.fullmatch(name)
        if not m:
            log.warning("ignoring archive member %r", name)
            continue
        layer = int(m.group(2)) if m.group(2) is not None else None
        halves.setdefault(layer, {})[m.group(1)] = tensor.array
    if not halves:
        raise DataError(f"{path}: no pos/neg members found")
    if None in halves and len(halves) > 1:
        raise DataError(f"{path}: mixes layerless pos/neg with per-layer members")
    pairs = {}
    for layer in sorted(halves, key=lambda x: -1 if x is None else x):
        h = halves[layer]
        if set(h) != {"pos", "neg"}:
            raise MissingPair(layer)
        pairs[layer] = (FeatureMatrix(h["pos"], "positive", layer), FeatureMatrix(h["neg"], "negative", layer))
    return pairs


def _sigma_key(layer: int | None) -> str:
    return "sigma" if layer is None else f"sigma_L{layer}"


def _mu_key(layer: int | None) -> str:
    return "mu" if layer is None else f"mu_L{layer}"


def sidecar_path(sigma_path: str | Path) -> Path:
    return Path(sigma_path).with_suffix(".json")


def load_sigma(path: str | Path) -> tuple[dict[int | None, HallucinationCovariance], dict[int | None, np.ndarray]]:
    members = tensorstore.read_npz(path)
    side = {}
    if sidecar_path(path).exists():
        side = json.loads(sidecar_path(path).read_text())
    counts = {str(k): v for k, v in side.get("n_per_layer", {}).items()}
    sigmas, mus = {}, {}
    for name, tensor in members.items():
        m = re.fullmatch(r"(sigma|mu)(?:_L(\d+))?", name)
        if not m:
            continue
        layer = int(m.group(2)) if m.group(2) is not None else None
        arr = tensor.as_f64()
        if m.group(1) == "sigma":
            if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
                raise DataError(f"{path}: {name} is not a square matrix")
            n = counts.get("null" if layer is None else str(layer), 0)
            sigmas[layer] = HallucinationCovariance(arr, n, layer=layer, centered=bool(side.get("centered", False)))
        else:
            mus[layer] = arr
    if not sigmas:
        raise DataError(f"{path}: no sigma members")
    return sigmas, mus


def _layer_label(layer: int | None) -> str:
    return "all" if layer is None else str(layer)


# ---------------------------------------------------------------------------
# operator construction shared by edit and verify


def resolve_alpha_flags(args) -> tuple[float | None, float | None]:
    """Return ``(alpha, eta)``; exactly one is set, or both ``None``."""
    given = [k for k in ("alpha", "eta", "preset") if getattr(args, k, None) is not None]
    if len(given) > 1:
        raise ConflictingAlphaFlags(f"give only one of --alpha/--eta/--preset (got {', '.join(given)})")
    if args.alpha is not None:
        if args.alpha < 0:
            raise UsageError("--alpha must be >= 0")
        return float(args.alpha), None
    if args.preset is not None:
        return PRESETS[args.preset], None
    if args.eta is not None:
        if not 0 < args.eta < 1:
            raise UsageError("--eta must lie in (0, 1)")
        return None, float(args.eta)
    return None, None


def _sigma_for(sigmas, layer, shared_layer):
    if shared_layer is not None:
        if shared_layer not in sigmas:
            raise DataError(f"sigma file has no layer {shared_layer} to share")
        return sigmas[shared_layer]
    if layer in sigmas:
        return sigmas[layer]
    if None in sigmas:
        return sigmas[None]
    raise DataError(f"sigma file has no covariance for layer {layer}")


def build_operators(args, selection: weightedit.LayerSelection) -> dict[int, SuppressionOperator]:
    alpha, eta = resolve_alpha_flags(args)
    kind = args.kind
    if kind == "mean":
        raise UsageError("--kind mean subtracts the mean difference from representations and cannot be folded into weights")
    if kind in ("soft", "svd") and alpha is None and eta is None:
        raise UsageError(f"--kind {kind} needs one of --alpha, --eta or --preset")
    if kind == "hard":
        if args.hard_k is None:
            raise UsageError("--kind hard needs --hard-k")
        if alpha is not None or eta is not None:
            raise ConflictingAlphaFlags("--kind hard does not take --alpha/--eta/--preset")

    sigmas, _ = load_sigma(args.sigma)
    pairs = None
    if kind == "svd":
        if not args.activations:
            raise UsageError("--kind svd needs --activations (the raw difference matrix)")
        pairs = load_activation_pairs(args.activations)

    ops: dict[int, SuppressionOperator] = {}
    cache: dict[int | None, SuppressionOperator] = {}
    for layer in selection.indices:
        cov = _sigma_for(sigmas, layer, args.shared_layer)
        if cov.layer in cache:
            ops[layer] = cache[cov.layer]
            continue
        if kind == "svd":
            src_layer = cov.layer if cov.layer in pairs else (None if None in pairs else cov.layer)
            if src_layer not in pairs:
                raise DataError(f"activations have no pair for layer {cov.layer}")
            spec = spectral.svd_modes(difference_set(*pairs[src_layer]))
        else:
            spec = spectral.eigendecompose(cov)
        if kind == "hard":
            op = spectral.hard_projection(spec, args.hard_k)
        else:
            try:
                a = alpha if alpha is not None else spectral.select_alpha(spec.lambda1, eta)
            except spectral.DegenerateSpectrum as exc:
                raise spectral.DegenerateSpectrum(f"layer {_layer_label(cov.layer)}: {exc}") from None
            if kind == "svd":
                op = spectral.svd_operator(spec, a, k=args.hard_k)
            else:
                op = spectral.suppression_operator(spec, a)
            op.eta = eta
        cache[cov.layer] = ops[layer] = op
    return ops


def _layers_arg(text: str | None) -> list[int] | None:
    if not text:
        return None
    try:
        return weightedit.parse_layers(str(text))
    except ValueError as exc:
        raise UsageError(f"--layers: {exc}") from None


def _selection(args) -> weightedit.LayerSelection:
    layers = _layers_arg(args.layers) or weightedit.DEFAULT_LAYERS
    try:
        return weightedit.LayerSelection(
            indices=layers,
            name_template=args.template,
            orientation=args.orientation,
            include_bias=args.include_bias,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_fit(args) -> int:
    pairs = load_activation_pairs(args.activations)
    wanted = set(_layers_arg(args.layers) or ()) or None
    out: dict[str, Tensor] = {}
    per_layer = {}
    warnings = []
    dim = None
    for layer, (pos, neg) in pairs.items():
        if wanted is not None and layer not in wanted:
            continue
        diffs = difference_set(pos, neg)
        cov = cov_mod.hallucination_covariance(diffs, center=args.center)
        mu = cov_mod.mean_difference(diffs)
        if not np.any(cov.sigma):
            msg = f"layer {_layer_label(layer)}: covariance is identically zero (pos == neg?)"
            log.warning(msg)
            warnings.append(msg)
        out[_sigma_key(layer)] = Tensor(cov.sigma)
        out[_mu_key(layer)] = Tensor(mu.mu)
        per_layer["null" if layer is None else str(layer)] = cov.sample_count
        dim = diffs.dim
    if wanted is not None and not out:
        raise DataError(f"none of layers {sorted(wanted)} present in {args.activations}")
    if wanted is not None:
        missing = wanted - {k for k in pairs if k is not None}
        if missing:
            raise DataError(f"layers {sorted(missing)} not present in {args.activations}")
    tensorstore.write_npz(args.out, out)
    counts = list(per_layer.values())
    side = {
        "schema_version": SCHEMA_VERSION,
        "source": str(args.activations),
        "layers": [None if k == "null" else int(k) for k in per_layer],
        "n": counts[0] if len(set(counts)) == 1 else None,
        "n_per_layer": per_layer,
        "d": dim,
        "centered": bool(args.center),
        "warnings": warnings,
    }
    sidecar_path(args.out).write_text(_dump(side) + "\n")
    print(_dump(side))
    return EXIT_OK


def cmd_spectrum(args) -> int:
    alpha, eta = resolve_alpha_flags(args)
    if alpha is None and eta is None:
        eta = spectral.DEFAULT_ETA
    sigmas, _ = load_sigma(args.sigma)
    wanted = set(_layers_arg(args.layers) or ()) or None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    layers = []
    for layer in sorted(sigmas, key=lambda x: -1 if x is None else x):
        if wanted is not None and layer not in wanted:
            continue
        spec = spectral.eigendecompose(sigmas[layer])
        if alpha is not None:
            a = alpha
        else:
            try:
                a = spectral.select_alpha(spec.lambda1, eta)
            except spectral.DegenerateSpectrum as exc:
                raise spectral.DegenerateSpectrum(f"layer {_layer_label(layer)}: {exc}") from None
        csv_path = out_dir / f"spectrum_L{_layer_label(layer)}.csv"
        spectral.write_spectrum_csv(csv_path, spec, a)
        entry = spectral.spectrum_summary(spec, a, eta)
        entry.update(layer=layer, csv=str(csv_path))
        if eta is not None:
            entry["matheuristic_alpha"] = a
        layers.append(entry)
    report = {"schema_version": SCHEMA_VERSION, "sigma": str(args.sigma), "layers": layers}
    _emit(report, str(out_dir / "spectrum.json"))
    return EXIT_OK


def cmd_alpha(args) -> int:
    alpha, eta = resolve_alpha_flags(args)
    if alpha is not None:
        raise UsageError("alpha takes --eta (or nothing for the default); --alpha/--preset already fix it")
    eta = spectral.DEFAULT_ETA if eta is None else eta
    rows = []
    if args.lambda1 is not None:
        rows.append({"layer": None, "lambda1": args.lambda1, "alpha": spectral.select_alpha(args.lambda1, eta)})
    elif args.sigma:
        sigmas, _ = load_sigma(args.sigma)
        for layer in sorted(sigmas, key=lambda x: -1 if x is None else x):
            spec = spectral.eigendecompose(sigmas[layer])
            try:
                a = spectral.select_alpha(spec.lambda1, eta)
            except spectral.DegenerateSpectrum as exc:
                raise spectral.DegenerateSpectrum(f"layer {_layer_label(layer)}: {exc}") from None
            rows.append({"layer": layer, "lambda1": spec.lambda1, "alpha": a})
    else:
        raise UsageError("alpha needs a sigma file or --lambda1")
    for row in rows:
        row["eta"] = eta
        row["retained_top_mode"] = spectral.damping(row["lambda1"], row["alpha"])
    _emit({"schema_version": SCHEMA_VERSION, "presets": PRESETS, "layers": rows}, args.out)
    return EXIT_OK


def cmd_edit(args) -> int:
    selection = _selection(args)
    ops = build_operators(args, selection)
    src = tensorstore.open_safetensors(args.checkpoint)
    report = weightedit.edit_checkpoint(src, args.out, ops, selection).to_dict()
    report["layer_indices"] = list(selection.indices)
    report["source"] = str(args.checkpoint)
    report["output"] = str(args.out)
    _emit(report, args.report or f"{args.out}.report.json")
    return EXIT_OK


def cmd_verify(args) -> int:
    selection = _selection(args)
    ops = build_operators(args, selection)
    src = tensorstore.open_safetensors(args.src)
    dst = tensorstore.open_safetensors(args.dst)
    # a dst with the target missing is a verification failure, not a usage error
    report = weightedit.verify_edit(src, dst, ops, selection, tol=args.tol)
    report["layer_indices"] = list(selection.indices)
    _emit(report, args.report)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_simulate(args) -> int:
    alpha, eta = resolve_alpha_flags(args)
    if args.kind == "hard":
        if args.hard_k is None:
            raise UsageError("--kind hard needs --hard-k")
        policy = testbed.AlphaPolicy(kind="hard", k=args.hard_k)
    elif args.kind == "soft":
        policy = testbed.AlphaPolicy(alpha=alpha, eta=eta if alpha is None else None)
    else:
        raise UsageError("simulate supports --kind soft or hard")
    strengths = tuple(sorted(args.strength, reverse=True))
    config = testbed.PlantConfig(d=args.d, n=args.n, strengths=strengths, noise_sigma=args.noise, seed=args.seed)
    report = testbed.end_to_end_check(config, policy)
    if args.csv:
        testbed.write_modes_csv(report, args.csv)
    _emit(report, args.out)
    return EXIT_OK if report["passed"] else EXIT_FAIL


# ---------------------------------------------------------------------------
# parser


def _add_alpha_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("damping strength (pick one)")
    g.add_argument("--alpha", type=float, help="fixed damping strength (>= 0)")
    g.add_argument("--eta", type=float, help="retained fraction of the top mode; alpha = (1-eta)/(eta*lambda1)")
    g.add_argument("--preset", choices=sorted(PRESETS), help="named operating point: chair=70, vqa=6")


def _add_operator_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sigma", required=True, help="covariance file written by `fit`")
    _add_alpha_flags(p)
    p.add_argument("--kind", choices=("soft", "hard", "mean", "svd"), default="soft")
    p.add_argument("--hard-k", type=int, help="modes removed by --kind hard (or damped by --kind svd)")
    p.add_argument("--activations", help="activation pairs, required for --kind svd")
    p.add_argument("--layers", help="layer indices, e.g. 16-31 or 2,3 (default 16-31)")
    p.add_argument("--template", default=weightedit.DEFAULT_TEMPLATE, help="tensor name with a {layer} placeholder")
    p.add_argument("--orientation", choices=("rows", "cols"), default="rows",
                   help="rows: weight is (d, d_ff); cols: weight is (d_ff, d)")
    p.add_argument("--include-bias", action="store_true", help="also map the down-projection bias b -> P b")
    p.add_argument("--shared-layer", type=int, help="use this layer's covariance for every edited layer")
    p.add_argument("--report", help="also write the JSON report here")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specfilter", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON or TOML file of flag defaults")
        p.set_defaults(func=func)
        return p

    p = add("fit", cmd_fit, "per-layer hallucination covariance from activation pairs")
    p.add_argument("activations", help="npz with pos_L{l}/neg_L{l} (or pos/neg) N x d members")
    p.add_argument("--out", required=True, help="output npz (a .json sidecar is written next to it)")
    p.add_argument("--layers", help="restrict to these layers")
    p.add_argument("--center", action="store_true", help="subtract the mean difference (off by default)")

    p = add("spectrum", cmd_spectrum, "eigen-spectrum CSV and JSON summary per layer")
    p.add_argument("sigma")
    _add_alpha_flags(p)
    p.add_argument("--layers", help="restrict to these layers")
    p.add_argument("--out", required=True, help="output directory")

    p = add("alpha", cmd_alpha, "spectrum-driven damping strength")
    p.add_argument("sigma", nargs="?")
    _add_alpha_flags(p)
    p.add_argument("--lambda1", type=float, help="use this leading eigenvalue instead of a sigma file")
    p.add_argument("--out", help="also write the JSON here")

    p = add("edit", cmd_edit, "write a corrected copy of a safetensors checkpoint")
    p.add_argument("checkpoint")
    _add_operator_flags(p)
    p.add_argument("--out", required=True, help="corrected checkpoint path")

    p = add("verify", cmd_verify, "check an edited checkpoint against its source")
    p.add_argument("--src", required=True)
    p.add_argument("--dst", required=True)
    _add_operator_flags(p)
    p.add_argument("--tol", type=float, default=0.0, help="absolute slack on top of dtype rounding")

    p = add("simulate", cmd_simulate, "planted-mode end-to-end check on synthetic data")
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--strength", type=float, nargs="+", default=[10.0, 5.0, 2.0])
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    _add_alpha_flags(p)
    p.add_argument("--kind", choices=("soft", "hard"), default="soft")
    p.add_argument("--hard-k", type=int)
    p.add_argument("--out", help="also write the JSON report here")
    p.add_argument("--csv", help="write per-mode measured vs predicted variance here")
    return parser


def _load_config(path: str) -> dict:
    text = Path(path).read_text()
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    path = _config_path(argv)
    if path is None:
        return parser.parse_args(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((tok for tok in argv if tok in choices), None)
    if command is None:
        return parser.parse_args(argv)
    try:
        values = _load_config(path)
    except (OSError, ValueError) as exc:
        raise tensorstore.IoFailure(f"cannot read config {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise UsageError(f"config {path} must be a table/object of flag values")
    sub = choices[command]
    by_flag = {}
    for action in sub._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                by_flag[opt[2:]] = action
        if not action.option_strings:
            by_flag[action.dest] = action
    defaults = {}
    for key, value in values.items():
        action = by_flag.get(key) or by_flag.get(key.replace("_", "-"))
        if action is None or action.dest in ("config", "help"):
            raise UsageError(f"unknown config key {key!r} for {command}")
        if isinstance(value, list) and action.nargs is None:
            value = ",".join(str(v) for v in value)
        defaults[action.dest] = value
    for action in sub._actions:
        if action.dest in defaults:
            action.required = False
            if not action.option_strings:
                action.nargs = "?"  # positional supplied by the file
                action.default = defaults[action.dest]
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("SPECFILTER_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(parser, argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        print(f"specfilter: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (
        tensorstore.TensorStoreError,
        OSError,
        DataError,
        cov_mod.CovarianceError,
        spectral.SpectralError,
        weightedit.EditError,
        ValueError,
    ) as exc:
        print(f"specfilter: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
