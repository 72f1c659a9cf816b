"""Experiment harness: synthetic data, source training, transfer, baseline, comparison.

Every command resolves its configuration from an optional JSON/YAML file
plus command-line flags (flags win) and embeds the resolved configuration
as a comment header in each CSV it writes.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from . import rng
from .data import (
    Dataset,
    export_synthetic,
    generate_synthetic_domains,
    load_cifar10,
    load_stl10,
    load_synthetic,
    resize_box,
    subsample_stratified,
)
from .network import build_paper_architecture
from .training import SGDConfig, TrainingLog, freeze_report, train
from .transfer import load, save, transfer_conv

log = logging.getLogger("stochasticnet")

NORMALIZATION = "pixels scaled to [0,1]; no mean subtraction"


class CLIError(Exception):
    pass


@dataclass
class StageConfig:
    epochs: int = 10
    learning_rate: float = 0.01
    batch_size: int = 32
    momentum: float = 0.9
    lr_decay: float = 0.98
    log_steps: bool = False


@dataclass
class ExperimentConfig:
    data: str = "synthetic"          # "synthetic" or "real"
    data_dir: str = "data"           # synthetic record files
    cifar_dir: Optional[str] = None
    stl_dir: Optional[str] = None
    seed: int = 0
    rho: float = 0.75
    fraction: float = 0.20
    stratified: bool = True
    fine_tune_conv: bool = False
    n_per_class: int = 200
    n_test_per_class: int = 50
    num_classes: int = 10
    image_hw: int = 32
    noise: float = 0.1
    source: StageConfig = field(default_factory=StageConfig)
    target: StageConfig = field(default_factory=StageConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise CLIError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        for stage in ("source", "target"):
            if stage in d:
                d[stage] = StageConfig(**d[stage])
        return cls(**d)

    def seeds(self) -> dict:
        s = self.seed
        return {
            "source_net_seed": rng.derive_seed(s, 1),
            "target_net_seed": rng.derive_seed(s, 2),
            "subsample_seed": rng.derive_seed(s, 3),
            "source_shuffle_seed": rng.derive_seed(s, 4),
            "target_shuffle_seed": rng.derive_seed(s, 5),
        }

    def sgd(self, stage: str) -> SGDConfig:
        st = getattr(self, stage)
        return SGDConfig(learning_rate=st.learning_rate, momentum=st.momentum,
                         batch_size=st.batch_size, epochs=st.epochs,
                         shuffle_seed=self.seeds()[f"{stage}_shuffle_seed"],
                         lr_decay=st.lr_decay, log_steps=st.log_steps)

    def resolved(self) -> dict:
        d = asdict(self)
        d["seeds"] = self.seeds()
        d["normalization"] = NORMALIZATION
        return d


def _read_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    if path.endswith((".yaml", ".yml")):
        import yaml
        return yaml.safe_load(text) or {}
    return json.loads(text)


def resolve_config(args, stage: Optional[str] = None) -> ExperimentConfig:
    cfg = ExperimentConfig.from_dict(_read_config(getattr(args, "config", None)))
    for name in ("data", "data_dir", "cifar_dir", "stl_dir", "seed", "rho", "fraction",
                 "n_per_class", "n_test_per_class", "noise"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "uniform_subsample", False):
        cfg.stratified = False
    if getattr(args, "fine_tune_conv", False):
        cfg.fine_tune_conv = True
    if stage is not None:
        over = {k: getattr(args, a) for k, a in (("epochs", "epochs"), ("learning_rate", "lr"),
                                                  ("batch_size", "batch"))
                if getattr(args, a, None) is not None}
        setattr(cfg, stage, replace(getattr(cfg, stage), **over))
    if not 0.0 < cfg.rho <= 1.0:
        raise CLIError(f"rho must lie in (0, 1], got {cfg.rho}")
    if not 0.0 < cfg.fraction <= 1.0:
        raise CLIError(f"fraction must lie in (0, 1], got {cfg.fraction}")
    if cfg.n_per_class < 1 or cfg.n_test_per_class < 1:
        raise CLIError("per-class sample counts must be positive")
    if cfg.noise < 0:
        raise CLIError(f"noise must be non-negative, got {cfg.noise}")
    return cfg


def _comment(cfg: ExperimentConfig, command: str, extra: Optional[dict] = None) -> str:
    lines = [f"command: {command}", f"config: {json.dumps(cfg.resolved(), sort_keys=True)}"]
    for k, v in (extra or {}).items():
        lines.append(f"{k}: {v}")
    return "\n".join(lines)


def _prepare_out(out: str, names, overwrite: bool) -> Path:
    d = Path(out)
    d.mkdir(parents=True, exist_ok=True)
    clash = [n for n in names if (d / n).exists()]
    if clash and not overwrite:
        raise CLIError(f"{d}: would overwrite {', '.join(clash)} (pass --overwrite)")
    return d


def _source_data(cfg: ExperimentConfig):
    if cfg.data == "synthetic":
        src_train, src_test, _, _ = _synthetic(cfg)
        return src_train, src_test
    if not cfg.cifar_dir:
        raise CLIError("real data needs cifar_dir")
    return load_cifar10(cfg.cifar_dir)


def _target_data(cfg: ExperimentConfig):
    if cfg.data == "synthetic":
        _, _, tgt_train, tgt_test = _synthetic(cfg)
        return tgt_train, tgt_test
    if not cfg.stl_dir:
        raise CLIError("real data needs stl_dir")
    train_set, test_set = load_stl10(cfg.stl_dir)
    return resize_box(train_set, 3), resize_box(test_set, 3)


def _synthetic(cfg: ExperimentConfig):
    if cfg.data != "synthetic":
        raise CLIError(f"unknown data kind {cfg.data!r}")
    d = Path(cfg.data_dir)
    if not d.is_dir():
        raise CLIError(f"synthetic data directory {d} does not exist (run gen-synthetic)")
    return load_synthetic(d, cfg.num_classes)


def _write_log(path: Path, tlog: TrainingLog, cfg: ExperimentConfig, command: str,
               extra: Optional[dict] = None):
    path.write_text(tlog.to_csv(_comment(cfg, command, extra)))
    if tlog.steps:
        path.with_name(path.stem + "_steps.csv").write_text(tlog.steps_csv())


def _target_subset(cfg: ExperimentConfig, tgt_train: Dataset) -> Dataset:
    return subsample_stratified(tgt_train, cfg.fraction, cfg.seeds()["subsample_seed"], cfg.stratified)


def _report(tlog: TrainingLog, name: str):
    if tlog.records:
        r = tlog.final
        print(f"{name}: epochs={r.epoch} train_error={r.train_error:.6f} test_error={r.test_error:.6f}")


# Commands -----------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    cfg = resolve_config(args)
    out = _prepare_out(args.out, ["source_train.bin", "source_test.bin", "target_train.bin",
                                  "target_test.bin", "synthetic.json"], args.overwrite)
    sets = generate_synthetic_domains(cfg.n_per_class, cfg.num_classes, cfg.image_hw,
                                      cfg.seed, cfg.n_test_per_class, cfg.noise)
    export_synthetic(sets, out)
    meta = {k: getattr(cfg, k) for k in ("seed", "n_per_class", "n_test_per_class",
                                         "num_classes", "image_hw", "noise")}
    (out / "synthetic.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    print(f"wrote {len(sets)} splits to {out}")
    return 0


def cmd_train_source(args) -> int:
    cfg = resolve_config(args, "source")
    out = _prepare_out(args.out, ["source.snet", "source_log.csv"], args.overwrite)
    train_set, test_set = _source_data(cfg)
    c, hw = train_set.image_shape[0], train_set.image_shape[1]
    net = build_paper_architecture(c, hw, train_set.num_classes, cfg.rho, cfg.seeds()["source_net_seed"])
    tlog = train(net, train_set, test_set, cfg.sgd("source"))
    save(net, out / "source.snet")
    _write_log(out / "source_log.csv", tlog, cfg, "train-source")
    _report(tlog, "source")
    return 0


def _train_target(args, transfer: bool) -> int:
    cfg = resolve_config(args, "target")
    name = "transfer" if transfer else "baseline"
    out = _prepare_out(args.out, [f"{name}.snet", f"{name}_log.csv"], args.overwrite)
    if transfer and not Path(args.source).is_file():
        raise CLIError(f"source checkpoint {args.source} not found")
    tgt_train, tgt_test = _target_data(cfg)
    subset = _target_subset(cfg, tgt_train)
    c, hw = tgt_train.image_shape[0], tgt_train.image_shape[1]
    net = build_paper_architecture(c, hw, tgt_train.num_classes, cfg.rho, cfg.seeds()["target_net_seed"])
    if transfer:
        source = load(args.source)
        transfer_conv(source, net, freeze=not cfg.fine_tune_conv)
    for row in freeze_report(net):
        log.info("layer %d %s frozen=%s surviving=%d/%d", *row)
    tlog = train(net, subset, tgt_test, cfg.sgd("target"))
    save(net, out / f"{name}.snet")
    extra = {"source_checkpoint": args.source} if transfer else None
    _write_log(out / f"{name}_log.csv", tlog, cfg, "transfer-train" if transfer else "baseline", extra)
    _report(tlog, name)
    return 0


def cmd_transfer_train(args) -> int:
    return _train_target(args, transfer=True)


def cmd_baseline(args) -> int:
    return _train_target(args, transfer=False)


def compare_logs(log_a: TrainingLog, log_b: TrainingLog) -> tuple[str, float]:
    """Side-by-side CSV and final test-error delta (a minus b)."""
    if not log_a.records or not log_b.records:
        raise CLIError("cannot compare empty logs")
    lines = ["epoch,a_train_error,a_test_error,b_train_error,b_test_error,test_error_delta"]
    for ra, rb in zip(log_a.records, log_b.records):
        if ra.epoch != rb.epoch:
            raise CLIError(f"epoch mismatch: {ra.epoch} vs {rb.epoch}")
        lines.append(f"{ra.epoch},{ra.train_error:.6f},{ra.test_error:.6f},"
                     f"{rb.train_error:.6f},{rb.test_error:.6f},{ra.test_error - rb.test_error:.6f}")
    delta = log_a.final.test_error - log_b.final.test_error
    return "\n".join(lines) + "\n", delta


def cmd_compare(args) -> int:
    out = _prepare_out(args.out, ["comparison.csv"], args.overwrite)
    log_a = TrainingLog.from_csv(Path(args.log_a).read_text())
    log_b = TrainingLog.from_csv(Path(args.log_b).read_text())
    text, delta = compare_logs(log_a, log_b)
    header = f"# a: {args.log_a}\n# b: {args.log_b}\n"
    (out / "comparison.csv").write_text(header + text)
    print(f"delta_final_test_error={delta:.6f}")
    return 0


def render_svg(log_a: TrainingLog, log_b: TrainingLog, labels=("transfer", "baseline"),
               width: int = 640, height: int = 400) -> str:
    """Train (dashed) and test (solid) error curves of two runs."""
    pad = 50
    epochs = max(len(log_a), len(log_b), 2)
    xs = lambda e: pad + (e - 1) / (epochs - 1) * (width - 2 * pad)
    ys = lambda v: height - pad - v * (height - 2 * pad)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">epoch</text>',
        f'<text x="15" y="{height / 2}" transform="rotate(-90 15 {height / 2})" text-anchor="middle">error</text>',
    ]
    for v in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{pad - 5}" y="{ys(v) + 4:.1f}" text-anchor="end" font-size="10">{v:.1f}</text>')
    for tlog, color, label, row in ((log_a, "#1f4fd1", labels[0], 0), (log_b, "#8e3fb0", labels[1], 1)):
        for attr, dash in (("train_error", ' stroke-dasharray="5,3"'), ("test_error", "")):
            pts = " ".join(f"{xs(r.epoch):.1f},{ys(getattr(r, attr)):.1f}" for r in tlog.records)
            parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2"{dash} points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 120}" y="{pad + 15 * row}" fill="{color}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.overwrite:
        raise CLIError(f"{out} exists (pass --overwrite)")
    log_a = TrainingLog.from_csv(Path(args.log_a).read_text())
    log_b = TrainingLog.from_csv(Path(args.log_b).read_text())
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(render_svg(log_a, log_b, (args.label_a, args.label_b)))
    print(f"wrote {out}")
    return 0


# Parser -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def _common(p: argparse.ArgumentParser, training: bool = True):
    p.add_argument("--config", help="JSON or YAML experiment config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    p.add_argument("--seed", type=int, help="base seed (u64)")
    p.add_argument("--data", choices=("synthetic", "real"))
    p.add_argument("--data-dir", dest="data_dir", help="synthetic record files")
    if training:
        p.add_argument("--cifar-dir", dest="cifar_dir")
        p.add_argument("--stl-dir", dest="stl_dir")
        p.add_argument("--rho", type=float, help="target connectivity (default 0.75)")
        p.add_argument("--fraction", type=float, help="target training fraction (default 0.20)")
        p.add_argument("--uniform-subsample", action="store_true",
                       help="draw the target fraction from the pooled set instead of per class")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stochasticnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-synthetic", help="write the synthetic two-domain datasets")
    _common(p, training=False)
    p.add_argument("--n-per-class", dest="n_per_class", type=int, help="training images per class")
    p.add_argument("--n-test-per-class", dest="n_test_per_class", type=int, help="test images per class")
    p.add_argument("--noise", type=float, help="pixel noise standard deviation")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train-source", help="train a StochasticNet on the source domain")
    _common(p)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("transfer-train", help="transplant conv layers and train the head")
    _common(p)
    p.add_argument("--source", required=True, help="source checkpoint (.snet)")
    p.add_argument("--fine-tune-conv", action="store_true", help="leave transferred conv layers trainable")
    p.set_defaults(func=cmd_transfer_train)

    p = sub.add_parser("baseline", help="train from scratch on the target subset")
    _common(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("compare", help="compare two training logs")
    p.add_argument("log_a")
    p.add_argument("log_b")
    p.add_argument("--out", required=True)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("plot", help="render two logs as an SVG line chart")
    p.add_argument("log_a")
    p.add_argument("log_b")
    p.add_argument("--out", required=True, help="SVG file")
    p.add_argument("--label-a", default="transfer")
    p.add_argument("--label-b", default="baseline")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except Exception as e:  # one machine-parseable line, then exit 1
        msg = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
