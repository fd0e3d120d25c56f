"""Command-line pipeline: synth -> train -> probe -> attack -> eval, plus sweeps.

Each stage reads the previous stage's files from the output directory and
writes its own. Every output carries the config digest in a ``#`` header
line (or a ``config_digest`` key for JSON), so a file can always be traced
back to the exact configuration that produced it.

Exit codes: 0 success, 2 configuration or validation error, 3 missing
upstream file, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from diffmi import __version__
from diffmi.attacks import ATTACKS, THREAT_MODELS, check_capability, run_attack, run_incremental
from diffmi.baselines import ShadowArtifacts
from diffmi.benchmark import BenchmarkSpec, SynthData, probe_all, synthesize, train_models
from diffmi.data import ProbeDataset, load_predictions, load_probe_records, save_predictions, save_probe_records
from diffmi.errors import DiffMIError, UpstreamFileError, ValidationError
from diffmi.evaluation import METRICS_HEADER, SweepConfig, class_sweep, compute_metrics, convergence_report, ratio_sweep, render_csv
from diffmi.kernels import KernelSpec
from diffmi.nonmember import SeparationSpec
from diffmi.oneclass import DEFAULT_NU
from diffmi.toy import load_model, save_model

ENV_OUTPUT_ROOT = "DIFFMI_OUTPUT_ROOT"
DEFAULT_OUTPUT = "diffmi-runs"

_SECTIONS = {
    "synthetic": {"num_classes", "dim", "samples_per_class", "cluster_spread", "label_noise"},
    "model": {"architecture", "epochs", "lr", "shadow"},
    "probe": {"generation", "perturb_variance", "generated_size", "reference_size", "extra_nonmember_factor"},
    "attack": {"attacks", "batch_size", "nu", "percentile", "kernel", "separation"},
    "sweep": {"ratios", "class_counts", "seeds", "attacks", "members_per_target", "setting"},
}
_TOP = {"seed", "setting", "output_dir"}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    setting: str = "blind"
    output_dir: Optional[str] = None
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    attacks: tuple = ()
    batch_size: Optional[int] = None
    nu: float = DEFAULT_NU
    percentile: float = 90.0
    kernel: KernelSpec = field(default_factory=KernelSpec)
    separation: SeparationSpec = field(default_factory=SeparationSpec)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def __post_init__(self):
        if self.setting not in THREAT_MODELS:
            raise ValidationError(f"unknown setting {self.setting!r}; expected one of {sorted(THREAT_MODELS)}")
        if not self.attacks:
            allowed = tuple(a for a in ATTACKS if ATTACKS[a].requires <= THREAT_MODELS[self.setting])
            object.__setattr__(self, "attacks", allowed)
        for a in self.attacks:
            if a not in ATTACKS:
                raise ValidationError(f"unknown attack {a!r}; expected one of {sorted(ATTACKS)}")
        if self.batch_size is not None and self.batch_size < 2:
            raise ValidationError("batch_size must be >= 2")

    def to_dict(self) -> dict:
        """Everything that determines results (the output location does not)."""
        b = self.benchmark
        return {
            "version": __version__,
            "seed": self.seed,
            "setting": self.setting,
            "synthetic": {k: v for k, v in asdict(b.synthetic).items() if k != "seed"},
            "model": {"architecture": b.architecture, "epochs": b.epochs, "lr": b.lr, "shadow": b.with_shadow},
            "probe": {
                "generation": b.generation,
                "perturb_variance": b.perturb_variance,
                "generated_size": b.generated_size,
                "reference_size": b.reference_size,
                "extra_nonmember_factor": b.extra_nonmember_factor,
            },
            "attack": {
                "attacks": list(self.attacks),
                "batch_size": self.batch_size,
                "nu": self.nu,
                "percentile": self.percentile,
                "kernel": self.kernel.to_dict(),
                "separation": asdict(self.separation),
            },
            "sweep": self.sweep.to_dict(),
        }

    @property
    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _check_keys(d: dict, allowed: set, where: str):
    unknown = set(d) - allowed
    if unknown:
        raise ValidationError(f"unknown config keys in {where}: {sorted(unknown)}")


def config_from_dict(d: dict) -> RunConfig:
    _check_keys(d, _TOP | set(_SECTIONS), "top level")
    for name, allowed in _SECTIONS.items():
        if not isinstance(d.get(name, {}), dict):
            raise ValidationError(f"[{name}] must be a table")
        _check_keys(d.get(name, {}), allowed, f"[{name}]")
    syn, mdl, prb = d.get("synthetic", {}), d.get("model", {}), d.get("probe", {})
    atk, swp = d.get("attack", {}), d.get("sweep", {})
    try:
        bench = BenchmarkSpec(
            synthetic=replace(BenchmarkSpec().synthetic, **syn),
            architecture=mdl.get("architecture", "mlp"),
            epochs=int(mdl.get("epochs", 2000)),
            lr=float(mdl.get("lr", 2.0)),
            with_shadow=bool(mdl.get("shadow", True)),
            **prb,
        )
        kernel = KernelSpec.from_dict(atk["kernel"]) if "kernel" in atk else KernelSpec()
        separation = SeparationSpec(**atk["separation"]) if "separation" in atk else SeparationSpec()
        sweep = SweepConfig(**swp)
        return RunConfig(
            seed=int(d.get("seed", 0)),
            setting=d.get("setting", "blind"),
            output_dir=d.get("output_dir"),
            benchmark=bench,
            attacks=tuple(atk.get("attacks", ())),
            batch_size=atk.get("batch_size"),
            nu=float(atk.get("nu", DEFAULT_NU)),
            percentile=float(atk.get("percentile", 90.0)),
            kernel=kernel,
            separation=separation,
            sweep=sweep,
        )
    except TypeError as exc:
        raise ValidationError(f"invalid config: {exc}") from None


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(d: dict, assignment: str) -> None:
    """``section.key=value`` (value in TOML syntax; bare words become strings)."""
    key, sep, value = assignment.partition("=")
    if not sep or not key.strip():
        raise ValidationError(f"override {assignment!r} must look like key=value")
    parts = key.strip().split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValidationError(f"override {assignment!r}: {p} is not a table")
    node[parts[-1]] = _parse_value(value.strip())


def load_config(path: Optional[str], overrides=()) -> RunConfig:
    d: dict = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ValidationError(f"{p}: config file not found")
        try:
            d = tomllib.loads(p.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{p}: {exc}") from None
    for o in overrides:
        apply_override(d, o)
    return config_from_dict(d)


# ----------------------------------------------------------------- layout

class Layout:
    def __init__(self, root: Path):
        self.root = root

    dataset = property(lambda self: self.root / "dataset.csv")
    target_model = property(lambda self: self.root / "models" / "target_model.json")
    shadow_model = property(lambda self: self.root / "models" / "shadow_model.json")
    probes = property(lambda self: self.root / "probes")
    predictions = property(lambda self: self.root / "predictions")
    convergence = property(lambda self: self.root / "convergence")
    metrics = property(lambda self: self.root / "metrics.csv")
    sweeps = property(lambda self: self.root / "sweeps")

    def probe(self, name: str) -> Path:
        return self.probes / f"{name}.jsonl"


def slug(attack: str) -> str:
    return attack.replace("/o", "o").replace("/", "")


def _mkdir(path: Path):
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create output directory {path}: {exc.strerror}") from None


def _write_text(path: Path, text: str):
    _mkdir(path.parent)
    try:
        path.write_text(text, encoding="utf-8", newline="")
    except OSError as exc:
        raise ValidationError(f"cannot write {path}: {exc.strerror}") from None


def _header(cfg: RunConfig, stage: str) -> dict:
    return {"config_digest": cfg.digest, "stage": stage, "seed": str(cfg.seed)}


def _require(path: Path, stage: str):
    if not path.is_file():
        raise UpstreamFileError(f"{path} is missing; run `diffmi {stage}` first")


# ------------------------------------------------------------------ synth

def write_dataset(data: SynthData, path: Path, header: dict):
    d = data.features.shape[1]
    rows = [
        (i, data.split[i], int(data.labels[i]), int(data.clean_labels[i]), *data.features[i].tolist())
        for i in range(len(data.labels))
    ]
    _write_text(path, render_csv(("row", "split", "label", "clean_label", *[f"x{j}" for j in range(d)]), rows, header))


def read_dataset(path: Path) -> SynthData:
    _require(path, "synth")
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        header = next(reader, None)
        if not header or header[:4] != ["row", "split", "label", "clean_label"]:
            raise ValidationError(f"{path}: not a dataset file")
        split, labels, clean, feats = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            try:
                split.append(row[1])
                labels.append(int(row[2]))
                clean.append(int(row[3]))
                feats.append([float(x) for x in row[4:]])
            except (ValueError, IndexError):
                raise ValidationError(f"{path}: malformed row {lineno}") from None
    return SynthData(np.asarray(feats), np.asarray(labels), np.asarray(clean), np.asarray(split))


def cmd_synth(cfg: RunConfig, out: Layout, args) -> int:
    data = synthesize(cfg.benchmark, cfg.seed)
    write_dataset(data, out.dataset, _header(cfg, "synth"))
    counts = {str(s): int(np.sum(data.split == s)) for s in sorted(set(data.split))}
    print(f"wrote {out.dataset} ({len(data.labels)} rows: {counts})")
    return 0


# ------------------------------------------------------------------ train

def _save_model(model, path: Path, cfg: RunConfig):
    _mkdir(path.parent)
    model.meta = {**model.meta, "config_digest": cfg.digest}
    save_model(model, path)


def cmd_train(cfg: RunConfig, out: Layout, args) -> int:
    data = read_dataset(out.dataset)
    model, shadow = train_models(cfg.benchmark, data, cfg.seed)
    _save_model(model, out.target_model, cfg)
    print(f"target model: train accuracy {model.meta['train_accuracy']:.3f} -> {out.target_model}")
    if shadow is not None:
        _save_model(shadow, out.shadow_model, cfg)
        print(f"shadow model: train accuracy {shadow.meta['train_accuracy']:.3f} -> {out.shadow_model}")
    return 0


# ------------------------------------------------------------------ probe

def cmd_probe(cfg: RunConfig, out: Layout, args) -> int:
    data = read_dataset(out.dataset)
    _require(out.target_model, "train")
    model = load_model(out.target_model)
    shadow_model = None
    if cfg.benchmark.with_shadow:
        _require(out.shadow_model, "train")
        shadow_model = load_model(out.shadow_model)
    bench = probe_all(cfg.benchmark, data, model, shadow_model, cfg.seed)
    h = _header(cfg, "probe")
    _mkdir(out.probes)
    target = bench.target.blind() if args.blind else bench.target
    save_probe_records(target, out.probe("target"), {**h, "blind": str(bool(args.blind)).lower()})
    truth = bench.target.ground_truth()
    _write_text(out.probes / "ground_truth.csv",
                render_csv(("id", "is_member"), [(i, str(v).lower()) for i, v in truth.items()], h))
    save_probe_records(bench.generated, out.probe("generated"), h)
    save_probe_records(bench.reference, out.probe("reference"), h)
    save_probe_records(bench.nonmember_pool, out.probe("holdout_pool"), h)
    if bench.shadow is not None:
        save_probe_records(bench.shadow.member_outputs, out.probe("shadow_members"), h)
        save_probe_records(bench.shadow.nonmember_outputs, out.probe("shadow_nonmembers"), h)
        _write_text(out.probes / "shadow_stats.json",
                    json.dumps({"avg_train_loss": bench.shadow.avg_train_loss, "config_digest": cfg.digest}, indent=1) + "\n")
    print(f"wrote {len(target)} target probes ({'blind' if args.blind else 'with ground truth'}) to {out.probes}")
    return 0


# ----------------------------------------------------------------- attack

def _load_probes(out: Layout, name: str, cfg: RunConfig) -> ProbeDataset:
    path = out.probe(name)
    _require(path, "probe")
    return load_probe_records(path, cfg.benchmark.synthetic.num_classes)


def _load_shadow(out: Layout, cfg: RunConfig) -> ShadowArtifacts:
    stats = out.probes / "shadow_stats.json"
    _require(stats, "probe")
    loss = float(json.loads(stats.read_text(encoding="utf-8"))["avg_train_loss"])
    return ShadowArtifacts(None, _load_probes(out, "shadow_members", cfg), _load_probes(out, "shadow_nonmembers", cfg), loss)


def cmd_attack(cfg: RunConfig, out: Layout, args) -> int:
    attacks = tuple(args.attacks.split(",")) if args.attacks else cfg.attacks
    for a in attacks:
        check_capability(a, cfg.setting)
    target = _load_probes(out, "target", cfg)
    generated = _load_probes(out, "generated", cfg) if any(a in ("diff-w/", "1class") for a in attacks) else None
    reference = _load_probes(out, "reference", cfg) if "top1_threshold" in attacks else None
    shadow = _load_shadow(out, cfg) if any(
        a in ("nn", "top3_nn", "loss_threshold", "top2_plus_true") for a in attacks) else None

    if args.mode == "incremental":
        if not args.record:
            raise ValidationError("--mode incremental needs --record ID")
        if len(attacks) != 1:
            raise ValidationError("--mode incremental runs exactly one attack; pass --attacks diff-w/ or diff-w/o")
        v = run_incremental(attacks[0], args.record, target, cfg.setting, generated, cfg.kernel,
                            separation=cfg.separation, batch_size=cfg.batch_size)
        print(f"{v.id},{'member' if v.predicted_member else 'nonmember'},{v.variant}")
        return 0

    h = _header(cfg, "attack")
    outcomes = {}
    for a in attacks:
        res = run_attack(a, target, cfg.setting, generated, reference, shadow, kernel=cfg.kernel,
                         separation=cfg.separation, batch_size=cfg.batch_size, nu=cfg.nu,
                         percentile=cfg.percentile, seed=cfg.seed, jobs=args.jobs)
        _mkdir(out.predictions)
        save_predictions(res.predictions, out.predictions / f"{slug(a)}.csv", {**h, "attack": a})
        n_mem = sum(p.predicted_member for p in res.predictions)
        print(f"{a}: {len(res.predictions)} predictions, {n_mem} members")
        if res.run is not None:
            outcomes[a] = res.run.outcomes
    if outcomes:
        rep = convergence_report(outcomes)
        _write_text(out.convergence / "trajectories.csv", rep.trajectories_csv(h))
        _write_text(out.convergence / "totals.csv", rep.totals_csv(h, include_time=False))
        _write_text(out.convergence / "timing.csv", rep.totals_csv(h))
    return 0


# ------------------------------------------------------------------- eval

def read_ground_truth(path: Path) -> dict:
    _require(path, "probe")
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(line for line in fh if not line.startswith("#"))
        if next(reader, None) != ["id", "is_member"]:
            raise ValidationError(f"{path}: expected header id,is_member")
        return {row[0]: row[1] == "true" for row in reader}


def cmd_eval(cfg: RunConfig, out: Layout, args) -> int:
    truth = read_ground_truth(out.probes / "ground_truth.csv")
    files = sorted(out.predictions.glob("*.csv")) if out.predictions.is_dir() else []
    if not files:
        raise UpstreamFileError(f"no prediction files under {out.predictions}; run `diffmi attack` first")
    reports = []
    for f in files:
        preds = load_predictions(f)
        try:
            reports.append(compute_metrics(preds, truth, digest=cfg.digest))
        except ValidationError as exc:
            raise ValidationError(f"{f}: {exc}") from None
    reports.sort(key=lambda r: r.variant)
    _write_text(out.metrics, render_csv(METRICS_HEADER, [r.row() for r in reports], _header(cfg, "eval")))
    for r in reports:
        print(f"{r.variant:>16}  P={r.precision:.3f}  R={r.recall:.3f}  F1={r.f1:.3f}")
    return 0


# ------------------------------------------------------------------ sweep

def cmd_sweep(cfg: RunConfig, out: Layout, args) -> int:
    sw = cfg.sweep
    for a in sw.attacks:
        check_capability(a, sw.setting)
    h = {**_header(cfg, "sweep"), "setting": sw.setting}
    kinds = ("ratio", "class") if args.kind == "both" else (args.kind,)
    for kind in kinds:
        if kind == "ratio":
            res = ratio_sweep(sw.attacks, cfg.benchmark, sw, jobs=args.jobs)
        else:
            res = class_sweep(sw.attacks, sw.class_counts, sw.seeds, cfg.benchmark, sw.setting, jobs=args.jobs)
        _write_text(out.sweeps / f"{kind}_sweep.csv", res.to_csv(h))
        if args.plot_data:
            _write_text(out.sweeps / f"{kind}_sweep_long.csv", res.long_csv(h))
        print(res.to_csv(), end="")
    return 0


# ------------------------------------------------------------------- main

COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "probe": cmd_probe,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value, e.g. --set synthetic.label_noise=0.2 (repeatable)")
    common.add_argument("--out", help=f"output directory (default: config output_dir, then ${ENV_OUTPUT_ROOT}, then ./{DEFAULT_OUTPUT})")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--setting", choices=sorted(THREAT_MODELS), help="override the threat model")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for batches and sweep cells")

    parser = argparse.ArgumentParser(prog="diffmi", description="Differential-comparison membership inference at desk scale.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="draw the synthetic dataset and its splits")
    sub.add_parser("train", parents=[common], help="train the target and shadow models")
    p = sub.add_parser("probe", parents=[common], help="query the target model for every probe set")
    p.add_argument("--blind", action="store_true", help="omit is_member from the target probe file")
    p = sub.add_parser("attack", parents=[common], help="run attacks, write predictions and convergence logs")
    p.add_argument("--attacks", help="comma-separated attack names (default: from config)")
    p.add_argument("--mode", choices=("batch", "incremental"), default="batch")
    p.add_argument("--record", help="record id for --mode incremental")
    sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p = sub.add_parser("sweep", parents=[common], help="nonmember-ratio and class-count sweeps")
    p.add_argument("--kind", choices=("ratio", "class", "both"), default="both")
    p.add_argument("--plot-data", action="store_true", help="also write long-format per-seed tables")
    return parser


def resolve_output(cfg: RunConfig, flag: Optional[str]) -> Path:
    if flag:
        return Path(flag)
    if cfg.output_dir:
        return Path(cfg.output_dir)
    return Path(os.environ.get(ENV_OUTPUT_ROOT, DEFAULT_OUTPUT))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.jobs < 1:
            raise ValidationError("--jobs must be >= 1")
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.setting:
            overrides.append(f'setting="{args.setting}"')
        cfg = load_config(args.config, overrides)
        out = Layout(resolve_output(cfg, args.out))
        return COMMANDS[args.command](cfg, out, args)
    except DiffMIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ValidationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
