"""Command-line entry point: ``mmrl <command> [flags]``.

Commands share one flat configuration (see ``mmrl.config``) and one run
directory holding every artifact:

    corpus.mmrl      gen        synthetic corpus manifest
    backbone.mmrl    pretrain   frozen surrogate checkpoint
    adapter.mmrl     train      trained adapter bundle
    loss.csv         train      per-step loss trace
    eval.json/.csv   eval       base-to-novel EvalRecord
    ablation.json/.csv  ablate  records for every grid cell
    gradcheck.txt    gradcheck  finite-difference report
    report.txt/.csv  report     Base/Novel/HM table
    run.log          all        timestamped command log (the only file with timestamps)

Exit codes: 0 success, 1 module error, 2 usage or configuration error,
3 broken invariant (protocol leakage, missing or corrupt artifact, failed check).
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import logging
import sys
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as C
from .container import write_atomic
from .core import init_representation_state, load_adapter, save_adapter, variant_from_name
from .data import class_token_ids, few_shot_sample, generate_corpus, load_manifest, nearest_prototype_accuracy, save_manifest
from .encoder import DualEncoder, encode_classifiers, image_features, load_backbone, pretrain_surrogate, save_backbone, zero_shot_classify
from .errors import ConfigError, DeterminismError, FormatError, IntegrityError, MMRLError, ProtocolError
from .evaluation import (
    EvalRecord,
    adapt,
    base_novel_split,
    evaluate_base_to_novel,
    evaluate_cross_dataset,
    harmonic_mean,
    load_records,
    records_csv,
    records_json,
    run_ablation,
)
from .tensor import no_grad
from .training import gradient_check, loss_csv

logger = logging.getLogger("mmrl")

GRADCHECK_TOL = 1e-4
COMMANDS = ("gen", "pretrain", "train", "eval", "ablate", "gradcheck", "report")
GRID_KEYS = ("variant", "alpha", "lam", "K", "J", "dr", "reg_kind", "epochs")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# run directory
# ---------------------------------------------------------------------------


class RunDir:
    def __init__(self, cfg: C.RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.run_dir)
        self.hash = cfg.hash()

    def path(self, name: str) -> Path:
        return self.root / name

    def write(self, name: str, text: str) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.path(name)
        write_atomic(p, text.encode())
        return p

    def log(self, command: str, status: str) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
        with open(self.path("run.log"), "a") as fh:
            fh.write(f"{stamp} {command} config_hash={self.hash} {status}\n")

    def require(self, name: str, what: str) -> Path:
        p = self.path(name)
        if not p.is_file():
            raise ProtocolError(f"missing {what} ({p})")
        return p

    def corpus(self):
        corpus = load_manifest(self.require("corpus.mmrl", "corpus manifest; run `mmrl gen`"))
        cfg = self.cfg
        expected = (cfg.classes, cfg.items_per_class, cfg.noise_scale, cfg.data_seed, cfg.image_size)
        found = (corpus.num_classes, corpus.items_per_class, corpus.noise_scale, corpus.seed, corpus.image_size)
        if expected != found:
            raise ProtocolError(f"corpus manifest {found} does not match the config {expected}; rerun `mmrl gen`")
        return corpus

    def backbone(self) -> DualEncoder:
        model, _ = load_backbone(self.require("backbone.mmrl", "backbone checkpoint; run `mmrl pretrain`"))
        if model.dims != self.cfg.dims():
            raise ProtocolError("backbone checkpoint dimensions do not match the config; rerun `mmrl pretrain`")
        return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(rd: RunDir) -> None:
    cfg = rd.cfg
    corpus = generate_corpus(cfg.classes, cfg.items_per_class, cfg.noise_scale, cfg.data_seed, cfg.image_size)
    rd.root.mkdir(parents=True, exist_ok=True)
    save_manifest(corpus, rd.path("corpus.mmrl"), {"config_hash": rd.hash})
    print(f"corpus: {corpus.num_classes} classes, {corpus.images.shape[0]} items, "
          f"nearest-prototype test acc {100 * nearest_prototype_accuracy(corpus):.2f}%")


def cmd_pretrain(rd: RunDir) -> None:
    cfg = rd.cfg
    corpus = rd.corpus()
    model = pretrain_surrogate(corpus, steps=cfg.pretrain_steps, lr=cfg.pretrain_lr, seed=cfg.backbone_seed,
                               dims=cfg.dims(), template=cfg.template)
    rd.root.mkdir(parents=True, exist_ok=True)
    save_backbone(model, rd.path("backbone.mmrl"), {"config_hash": rd.hash})
    test = corpus.split_indices("test")
    with no_grad():
        W = encode_classifiers(class_token_ids(corpus, range(corpus.num_classes)), cfg.template, model)
        probs = np.concatenate([zero_shot_classify(image_features(corpus.images[test[i : i + 128]], model), W, model.temperature)
                                for i in range(0, test.size, 128)])
    acc = 100.0 * float((probs.argmax(-1) == corpus.labels[test]).mean())
    print(f"backbone: {cfg.pretrain_steps} steps, zero-shot test acc {acc:.2f}%, sha256 {model.fingerprint()[:16]}")


def cmd_train(rd: RunDir) -> None:
    cfg = rd.cfg
    corpus, backbone = rd.corpus(), rd.backbone()
    split = base_novel_split(corpus.num_classes, cfg.split_seed)
    state, result, idx = adapt(corpus, backbone, split, cfg.train_config(), cfg.shots)
    rd.root.mkdir(parents=True, exist_ok=True)
    save_adapter(state, rd.path("adapter.mmrl"), {
        "config_hash": rd.hash,
        "split_seed": str(cfg.split_seed),
        "train_indices": ",".join(str(int(i)) for i in idx),
    })
    rd.write("loss.csv", loss_csv(result.trace, rd.hash))
    print(f"trained on {len(idx)} items from base classes {list(split.base)}: "
          f"final epoch loss {result.epoch_loss[-1]:.6f}, train acc {100 * result.epoch_acc[-1]:.2f}%")


def cmd_eval(rd: RunDir) -> None:
    cfg = rd.cfg
    bundle = rd.require("adapter.mmrl", "adapter bundle; run `mmrl train`")
    corpus, backbone = rd.corpus(), rd.backbone()
    state, header = load_adapter(bundle, backbone)
    variant = variant_from_name(cfg.variant)
    if variant.mode != state.variant.mode:
        raise ProtocolError(f"adapter was trained as {state.variant.mode!r} but eval asks for {variant.mode!r}")
    state.variant = variant
    ti = header.get("train_indices", "")
    train_idx = np.array([int(i) for i in ti.split(",")], dtype=np.int64) if ti else None
    split = base_novel_split(corpus.num_classes, cfg.split_seed)
    rec = evaluate_base_to_novel(corpus, backbone, state, split, cfg.alpha, cfg.variant, cfg.seed, rd.hash,
                                 train_indices=train_idx, template=cfg.template)
    rd.write("eval.json", records_json([rec]))
    rd.write("eval.csv", records_csv([rec]))
    shifted = evaluate_cross_dataset(corpus, backbone, state, cfg.shift_seed, cfg.template)
    print(f"{rec.variant}: base {rec.base_acc:.2f}  novel {rec.novel_acc:.2f}  HM {rec.hm:.2f}  "
          f"(shifted corpus, all classes: {shifted:.2f})")


def parse_grid(text: str) -> dict[str, list[str]]:
    """``key=v1,v2;key=v3`` into ordered value lists."""
    grid: dict[str, list[str]] = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        if "=" not in part:
            raise ConfigError(f"grid entry {part!r} is not key=values")
        key, values = part.split("=", 1)
        key = C.canonical_key(key)
        if key not in GRID_KEYS:
            raise ConfigError(f"cannot sweep {key!r}; choose from {GRID_KEYS}")
        vals = [v.strip() for v in values.split(",") if v.strip()]
        if not vals:
            raise ConfigError(f"grid entry {key!r} has no values")
        grid[key] = vals
    return grid


def grid_cells(cfg: C.RunConfig) -> list[tuple[str, object]]:
    grid = parse_grid(cfg.grid) if cfg.grid.strip() else {}
    grid.setdefault("variant", list(C.variant_names()))
    keys = list(grid)
    cells = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        values = {k: C.coerce(k, v) for k, v in zip(keys, combo)}
        cell = replace(cfg, **values)
        extras = ",".join(f"{'lambda' if k == 'lam' else k}={values[k]}" for k in keys if k != "variant" and len(grid[k]) > 1)
        label = cell.variant + (f" [{extras}]" if extras else "")
        cells += [(label, cell.train_config(seed=s)) for s in cfg.seed_list()]
    return cells


def cmd_ablate(rd: RunDir) -> None:
    cfg = rd.cfg
    corpus, backbone = rd.corpus(), rd.backbone()
    split = base_novel_split(corpus.num_classes, cfg.split_seed)
    records = run_ablation(corpus, backbone, grid_cells(cfg), split, cfg.shots, rd.hash)
    rd.write("ablation.json", records_json(records))
    rd.write("ablation.csv", records_csv(records))
    print(format_table(summarize(records)), end="")


def cmd_gradcheck(rd: RunDir) -> None:
    cfg = rd.cfg
    if rd.path("corpus.mmrl").is_file():
        corpus = rd.corpus()
    else:
        corpus = generate_corpus(cfg.classes, cfg.items_per_class, cfg.noise_scale, cfg.data_seed, cfg.image_size)
    backbone = rd.backbone() if rd.path("backbone.mmrl").is_file() else DualEncoder(cfg.dims(), cfg.backbone_seed).freeze()
    split = base_novel_split(corpus.num_classes, cfg.split_seed)
    classes = list(split.base)[: cfg.gradcheck_classes]
    if len(classes) < 2 or not 1 <= cfg.gradcheck_images <= len(classes):
        raise ConfigError("gradcheck needs 2+ classes and 1..classes images")
    idx = few_shot_sample(corpus, 1, classes[: cfg.gradcheck_images], cfg.seed)
    labels = np.array([classes.index(int(c)) for c in corpus.labels[idx]])
    state = init_representation_state(cfg.K, cfg.dr, cfg.J, backbone, cfg.seed, variant_from_name(cfg.variant))
    report = gradient_check(corpus.images[idx], labels, class_token_ids(corpus, classes), backbone, state,
                            cfg.train_config().weights, cfg.template, cfg.reg_kind)
    text = report.text(rd.hash)
    rd.write("gradcheck.txt", text)
    print(text, end="")
    if not report.max_error < GRADCHECK_TOL:
        raise ProtocolError(f"gradient check failed: max rel err {report.max_error:.3e} >= {GRADCHECK_TOL}")


def summarize(records: Sequence[EvalRecord]) -> list[tuple[str, float, float, float, int]]:
    """Per variant: mean base, mean novel, HM of the means, seed count; sorted by HM."""
    groups: dict[str, list[EvalRecord]] = {}
    for r in records:
        groups.setdefault(r.variant, []).append(r)
    rows = []
    for name, rs in groups.items():
        b = float(np.mean([r.base_acc for r in rs]))
        n = float(np.mean([r.novel_acc for r in rs]))
        rows.append((name, b, n, harmonic_mean(b, n), len(rs)))
    return sorted(rows, key=lambda r: (-r[3], r[0]))


def format_table(rows) -> str:
    width = max([len("Variant")] + [len(r[0]) for r in rows])
    out = [f"{'Variant':<{width}}  {'Base':>6}  {'Novel':>6}  {'HM':>6}  {'Seeds':>5}"]
    out += [f"{name:<{width}}  {b:6.2f}  {n:6.2f}  {hm:6.2f}  {k:5d}" for name, b, n, hm, k in rows]
    return "\n".join(out) + "\n"


def table_csv(rows, config_hash: str) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "base", "novel", "hm", "seeds"])
    for name, b, n, hm, k in rows:
        w.writerow([name, f"{b:.2f}", f"{n:.2f}", f"{hm:.2f}", k])
    return buf.getvalue()


def cmd_report(rd: RunDir, source: str | None, fmt: str) -> None:
    if source:
        path = Path(source)
        if not path.is_file():
            raise ProtocolError(f"missing records file ({path})")
    else:
        path = next((rd.path(n) for n in ("ablation.json", "eval.json") if rd.path(n).is_file()), None)
        if path is None:
            raise ProtocolError(f"missing records: no ablation.json or eval.json in {rd.root}")
    try:
        records = load_records(path.read_text())
    except (ValueError, TypeError) as exc:
        raise IntegrityError(f"unreadable records file {path}: {exc}") from exc
    rows = summarize(records)
    rd.write("report.txt", f"# config_hash={rd.hash}\n" + format_table(rows))
    rd.write("report.csv", table_csv(rows, rd.hash))
    print(table_csv(rows, rd.hash) if fmt == "csv" else format_table(rows), end="")


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------


def _config_flags() -> argparse.ArgumentParser:
    p = _Parser(add_help=False)
    g = p.add_argument_group("configuration (mirrors every config key)")
    g.add_argument("--config", metavar="FILE", help="key = value config file")
    g.add_argument("-q", "--quiet", action="store_true", help="only print results")
    for name, kind in C.FIELD_TYPES.items():
        flag = "lambda" if name == "lam" else name
        names = [f"--{flag}"]
        if "_" in flag:
            names.append(f"--{flag.replace('_', '-')}")
        if name == "dr":
            names.append("--d-r")
        conv = {"int": int, "float": float}.get(kind, str)
        g.add_argument(*names, dest=name, type=conv, default=None, metavar=kind.upper())
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mmrl", description="Multi-modal representation learning adapter toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    common = _config_flags()
    helps = {
        "gen": "generate the synthetic corpus manifest",
        "pretrain": "pretrain and freeze the surrogate backbone",
        "train": "train an adapter on base-class few-shot data",
        "eval": "base-to-novel evaluation of the trained adapter",
        "ablate": "train and evaluate a grid of variants/hyperparameters",
        "gradcheck": "finite-difference check of the training objective",
        "report": "summarize records as a Base/Novel/HM table",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
        if name == "report":
            sp.add_argument("--input", metavar="FILE", help="records JSON (default: ablation.json or eval.json)")
            sp.add_argument("--format", choices=("text", "csv"), default="text")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return 2
    if isinstance(exc, (ProtocolError, IntegrityError, FormatError, DeterminismError)):
        return 3
    return 1


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2

    flags = {k: getattr(args, k) for k in C.FIELD_TYPES}
    try:
        text = Path(args.config).read_text() if args.config else None
        cfg = C.resolve(text, flags)
    except OSError as exc:
        print(f"error: cannot read config file: {exc}", file=sys.stderr)
        return 2
    except MMRLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)

    if not logging.getLogger().handlers:
        logging.basicConfig(stream=sys.stderr, format="%(message)s")
    logger.setLevel(logging.WARNING if args.quiet else logging.INFO)
    rd = RunDir(cfg)
    if not args.quiet:
        print(f"# resolved config (hash {rd.hash})\n" + cfg.to_text(), file=sys.stderr, end="")

    handlers = {
        "gen": lambda: cmd_gen(rd),
        "pretrain": lambda: cmd_pretrain(rd),
        "train": lambda: cmd_train(rd),
        "eval": lambda: cmd_eval(rd),
        "ablate": lambda: cmd_ablate(rd),
        "gradcheck": lambda: cmd_gradcheck(rd),
        "report": lambda: cmd_report(rd, args.input, args.format),
    }
    try:
        handlers[args.command]()
    except (MMRLError, OSError) as exc:
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        _safe_log(rd, args.command, f"exit={code}")
        return code
    _safe_log(rd, args.command, "exit=0")
    return 0


def _safe_log(rd: RunDir, command: str, status: str) -> None:
    try:
        rd.log(command, status)
    except OSError:
        pass


def main() -> None:
    sys.exit(run())
