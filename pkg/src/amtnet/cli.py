"""Command-line entry point: generate, train, eval, distill, gradcheck, export-embeddings.

Every subcommand reads an optional JSON run config (``--config``); flags
override its fields.  The resolved config is echoed to the output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional

from .data import SyntheticSpec, export_embeddings, generate_synthetic, load_dataset, synthetic_split
from .episodes import EpisodeSpec, evaluate
from .errors import ContractViolation
from .fusion import FusionVariant
from .model import AMTNet
from .training import TrainConfig, build_model, distill, train

log = logging.getLogger("amtnet")

EXIT_OK, EXIT_CONTRACT, EXIT_USAGE = 0, 1, 2


@dataclass
class EvalSection:
    episodes: int = 1000
    seed: int = 0
    workers: int = 1


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    eval: EvalSection = field(default_factory=EvalSection)
    data: Optional[str] = None      # manifest path; None means in-memory synthetic data
    out: str = "runs/latest"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        top = {f.name for f in fields(cls)}
        unknown = set(d) - top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls()
        if "train" in d:
            try:
                cfg.train = TrainConfig.from_dict(d["train"])
            except ContractViolation as exc:
                raise ConfigError(f"train: {exc}") from None
        if "synthetic" in d:
            cfg.synthetic = _section(SyntheticSpec, d["synthetic"], "synthetic")
        if "eval" in d:
            cfg.eval = _section(EvalSection, d["eval"], "eval")
        cfg.data = d.get("data", cfg.data)
        cfg.out = d.get("out", cfg.out)
        return cfg

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "synthetic": asdict(self.synthetic),
                "eval": asdict(self.eval), "data": self.data, "out": self.out}


class ConfigError(ContractViolation):
    pass


def _section(cls, d: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys in {name}: {sorted(unknown)}")
    return cls(**d)


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    try:
        return RunConfig.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


# flag dest -> (section, field)
_OVERRIDES = {
    "seed": ("train", "seed"), "ways": ("train", "ways"), "shots": ("train", "shots"),
    "queries": ("train", "queries"), "epochs": ("train", "epochs"),
    "episodes_per_epoch": ("train", "episodes_per_epoch"), "variant": ("train", "variant"),
    "alpha": ("train", "alpha"), "lam": ("train", "lam"), "beta": ("train", "beta"),
    "teacher": ("train", "teacher"), "precision": ("train", "precision"),
    "deterministic": ("train", "deterministic"), "lr": ("train", "lr"), "width": ("train", "width"),
    "use_global": ("train", "use_global"), "use_rotation": ("train", "use_rotation"),
    "episodes": ("eval", "episodes"), "eval_seed": ("eval", "seed"), "workers": ("eval", "workers"),
    "data": (None, "data"), "out": (None, "out"),
}


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = load_run_config(getattr(args, "config", None))
    train_over = {}
    for dest, (section, name) in _OVERRIDES.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if section is None:
            setattr(cfg, name, value)
        elif section == "train":
            train_over[name] = value
        else:
            setattr(getattr(cfg, section), name, value)
    if train_over:
        cfg.train = TrainConfig.from_dict({**cfg.train.to_dict(), **train_over})
    if getattr(args, "cmd", None) == "generate" and args.seed is not None:
        cfg.synthetic = SyntheticSpec(**{**asdict(cfg.synthetic), "seed": args.seed})
    return cfg


def _dataset(cfg: RunConfig, split: str):
    if cfg.data:
        return load_dataset(cfg.data, split)
    return synthetic_split(cfg.synthetic, split)


def _echo(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True), encoding="utf-8")


# --- subcommands ---------------------------------------------------------------

def cmd_generate(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    manifest = generate_synthetic(cfg.synthetic, out)
    _echo(cfg, out)
    print(manifest)
    return EXIT_OK


def _finish_training(cfg: RunConfig, model, rows, out: Path) -> None:
    from .plotting import plot_training_curves

    plot_training_curves(rows, out / "training_curves.png")
    last = rows[-1] if rows else {}
    print(f"trained {cfg.train.variant}: {len(rows)} epochs, final L_total={last.get('L_total', float('nan')):.4f}")
    print(out / "model.amt")


def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(cfg.out)
    _echo(cfg, out)
    base = _dataset(cfg, "base")
    if cfg.train.teacher and cfg.train.beta > 0:
        model, rows = distill(cfg.train.teacher, base, cfg.train, out)
    else:
        model = build_model(cfg.train, base)
        model, rows = train(model, base, cfg.train, out)
    _finish_training(cfg, model, rows, out)
    return EXIT_OK


def cmd_distill(args, cfg: RunConfig) -> int:
    if not cfg.train.teacher:
        raise ContractViolation("distill needs --teacher CHECKPOINT")
    if cfg.train.beta <= 0:
        cfg.train = TrainConfig.from_dict({**cfg.train.to_dict(), "beta": 0.75})
    out = Path(cfg.out)
    _echo(cfg, out)
    model, rows = distill(cfg.train.teacher, _dataset(cfg, "base"), cfg.train, out)
    _finish_training(cfg, model, rows, out)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    from .plotting import plot_accuracy_bars

    model = AMTNet.load(args.checkpoint)
    novel = _dataset(cfg, args.split)
    spec = EpisodeSpec(cfg.train.ways, cfg.train.shots, cfg.train.queries)
    report = evaluate(model, novel, spec, cfg.eval.episodes, cfg.eval.seed, cfg.eval.workers)
    print(report.format())
    out = Path(cfg.out)
    _echo(cfg, out)
    report.write_csv(out / "eval.csv")
    bars = {"merged": (report.mean_accuracy, report.ci95), **report.per_metric}
    title = f"{spec.ways}-way {spec.shots}-shot, {report.n_episodes} episodes"
    plot_accuracy_bars(bars, out / "accuracy.png", title)
    log.info("%s", report.to_text())
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from . import gradcheck

    if args.precision == 32:
        raise ContractViolation("gradcheck runs in 64-bit only; finite differences are meaningless at 32-bit")
    report = gradcheck.run_suite(seed=cfg.train.seed)
    maxima = gradcheck.module_maxima(report)
    for module, value in maxima.items():
        flag = "ok" if value < gradcheck.TOLERANCE else "FAIL"
        print(f"{module:<32s} {value:.3e}  {flag}")
    for name, value in report["_componentwise"].items():
        print(f"  componentwise {name:<20s} {value:.3e}")
    print(f"elapsed {report['_seconds']['elapsed']:.1f}s")
    if args.out is not None:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        rows = [f"{g},{n},{v!r}" for g, d in report.items() for n, v in d.items()]
        (out / "gradcheck.csv").write_text("group,check,value\n" + "\n".join(rows) + "\n", encoding="utf-8")
    return EXIT_OK if gradcheck.passes(report) else EXIT_CONTRACT


def cmd_export(args, cfg: RunConfig) -> int:
    model = AMTNet.load(args.checkpoint)
    ds = _dataset(cfg, args.split)
    path = Path(args.path) if args.path else Path(cfg.out) / f"embeddings_{args.split}.csv"
    export_embeddings(model, ds, path)
    print(path)
    return EXIT_OK


# --- parser ---------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, training: bool = False, episodes: bool = False) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--data", help="dataset manifest (default: in-memory synthetic data)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", type=int, choices=(32, 64))
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None)
    if episodes or training:
        p.add_argument("--ways", type=int)
        p.add_argument("--shots", type=int)
        p.add_argument("--queries", type=int)
    if training:
        p.add_argument("--epochs", type=int)
        p.add_argument("--episodes-per-epoch", dest="episodes_per_epoch", type=int)
        p.add_argument("--variant", choices=[v.value for v in FusionVariant])
        p.add_argument("--alpha", type=float)
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--teacher", help="teacher checkpoint for distillation")
        p.add_argument("--lr", type=float)
        p.add_argument("--width", type=int, help="Conv4 channel width")
        p.add_argument("--global", dest="use_global", action=argparse.BooleanOptionalAction, default=None)
        p.add_argument("--rotation", dest="use_rotation", action=argparse.BooleanOptionalAction, default=None)
    if episodes:
        p.add_argument("--episodes", type=int)
        p.add_argument("--eval-seed", dest="eval_seed", type=int)
        p.add_argument("--workers", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amtnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("generate", help="render the synthetic dataset to disk")
    _common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="episodic training")
    _common(p, training=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="train a student against a teacher checkpoint")
    _common(p, training=True)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint on sampled episodes")
    _common(p, episodes=True)
    p.add_argument("checkpoint")
    p.add_argument("--split", default="novel")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-embeddings", help="write GAP'd features to CSV")
    _common(p)
    p.add_argument("checkpoint")
    p.add_argument("--split", default="novel")
    p.add_argument("--path", help="CSV path (default: OUT/embeddings_SPLIT.csv)")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        return args.func(args, cfg)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"amtnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractViolation as exc:
        print(f"amtnet: {exc}", file=sys.stderr)
        return EXIT_CONTRACT


if __name__ == "__main__":
    sys.exit(main())
