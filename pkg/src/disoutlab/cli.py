"""Command-line surface: train, eval, gradcheck, mask-stats, compare.

Configs are flat ``key = value`` text files with dotted section prefixes
(``data.``, ``augment.``, ``disout.``, ``compare.``).  The same dotted keys
work as ``--set key=value`` overrides.  Every run writes a resolved-config
snapshot that reproduces it bit-exactly.

Exit codes: 0 ok, 1 verification failure, 2 configuration error, 3 I/O error.
"""

import argparse
import copy
import dataclasses
import os
import sys
from collections import Counter

import numpy as np

from .disout import sample_block_mask, sample_element_mask
from .errors import ConfigError, FormatError, NumericError, TrainingDiverged
from .fdcheck import (
    run_backprop_suite,
    run_conv_suite,
    run_fc_suite,
)
from .disout import exact_grad_conv, exact_grad_fc
from .train import (
    REGULARIZERS,
    TrainConfig,
    build_network,
    evaluate,
    load_checkpoint,
    normalization_transform,
    resolve_datasets,
    train,
)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_IO = 3

OUT_ENV = "DISOUTLAB_OUT"
SNAPSHOT_NAME = "config.resolved"

_COMPARE_KEYS = ("compare.regularizers", "compare.seeds")


@dataclasses.dataclass
class CliConfig:
    """One parsed invocation: subcommand, config source, and flags.

    ``options`` carries the subcommand-specific flags (gradcheck instance
    counts, mask-stats shape, the eval checkpoint, and so on).
    """

    subcommand: str
    config_path: str | None = None
    overrides: tuple = ()
    out_dir: str | None = None
    options: dict = dataclasses.field(default_factory=dict)


def config_schema():
    """Dotted key -> (section attribute or None, field name, value type)."""
    schema = {}
    defaults = TrainConfig()
    for fld in dataclasses.fields(TrainConfig):
        if fld.name in ("data", "augment", "distortion"):
            continue
        schema[fld.name] = (None, fld.name, type(getattr(defaults, fld.name)))
    sections = (("data", "data"), ("augment", "augment"),
                ("disout", "distortion"))
    for prefix, attr in sections:
        sub = getattr(defaults, attr)
        for fld in dataclasses.fields(type(sub)):
            schema[f"{prefix}.{fld.name}"] = (
                attr, fld.name, type(getattr(sub, fld.name)))
    for key in _COMPARE_KEYS:
        schema[key] = ("compare", key.split(".", 1)[1], str)
    return schema


def _coerce(key: str, text: str, typ):
    text = text.strip()
    if typ is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key '{key}' expects true/false, got {text!r}")
    if typ is int:
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(
                f"key '{key}' expects an integer, got {text!r}") from exc
    if typ is float:
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(
                f"key '{key}' expects a number, got {text!r}") from exc
    return text


def parse_config_text(text: str, origin: str):
    """Yield (key, raw value, line number); reject malformed lines."""
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(
                f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = stripped.split("=", 1)
        entries.append((key.strip(), raw.strip(), lineno))
    return entries


def resolve_config(config_path=None, set_pairs=()):
    """Build a TrainConfig from defaults, a config file, then overrides.

    Returns (config, compare options dict).  Unknown keys and type errors
    raise ConfigError naming the key (and line, for file entries).
    """
    schema = config_schema()
    cfg = TrainConfig()
    compare_opts = {"regularizers": "", "seeds": ""}

    def assign(key, value):
        section, name, _ = schema[key]
        if section == "compare":
            compare_opts[name] = value
        elif section is None:
            setattr(cfg, name, value)
        else:
            setattr(getattr(cfg, section), name, value)

    if config_path is not None:
        with open(config_path, "r") as fh:
            text = fh.read()
        for key, raw, lineno in parse_config_text(text, config_path):
            if key not in schema:
                raise ConfigError(
                    f"{config_path}:{lineno}: unknown key '{key}'")
            try:
                value = _coerce(key, raw, schema[key][2])
            except ConfigError as exc:
                raise ConfigError(f"{config_path}:{lineno}: {exc}") from exc
            assign(key, value)

    for pair in set_pairs:
        if "=" not in pair:
            raise ConfigError(
                f"override {pair!r} must have the form key=value")
        key, raw = pair.split("=", 1)
        key = key.strip()
        if key not in schema:
            raise ConfigError(f"unknown key '{key}' in --set override")
        assign(key, _coerce(key, raw, schema[key][2]))

    return cfg, compare_opts


def _fmt_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def snapshot_text(cfg: TrainConfig, compare_opts=None) -> str:
    """Render every key (including defaults) in the config file format."""
    lines = ["# resolved configuration; rerun with: disoutlab train --config "
             + SNAPSHOT_NAME]
    for key, (section, name, _) in config_schema().items():
        if section == "compare":
            if compare_opts is None:
                continue
            value = compare_opts[name]
        elif section is None:
            value = getattr(cfg, name)
        else:
            value = getattr(getattr(cfg, section), name)
        lines.append(f"{key} = {_fmt_value(value)}")
    return "\n".join(lines) + "\n"


def write_snapshot(out_dir: str, cfg: TrainConfig, compare_opts=None) -> str:
    path = os.path.join(out_dir, SNAPSHOT_NAME)
    with open(path, "w", newline="") as fh:
        fh.write(snapshot_text(cfg, compare_opts))
    return path


def _default_out_dir(label: str) -> str:
    root = os.environ.get(OUT_ENV, "runs")
    return os.path.join(root, label)


def run_train(cli: CliConfig) -> int:
    cfg, _ = resolve_config(cli.config_path, cli.overrides)
    cfg.validate()
    out_dir = cli.out_dir or _default_out_dir(
        f"{cfg.preset}-{cfg.regularizer}-s{cfg.seed}")
    os.makedirs(out_dir, exist_ok=True)
    write_snapshot(out_dir, cfg)
    result = train(cfg, out_dir=out_dir, resume=cli.options["resume"],
                   checkpoint_every=cli.options["checkpoint_every"])
    print(f"train: {cfg.epochs} epochs done, "
          f"train acc {result.final_train_acc:.4f}, "
          f"val acc {result.final_val_acc:.4f}")
    print(f"train: artifacts in {out_dir}")
    return EXIT_OK


def run_eval(cli: CliConfig) -> int:
    cfg, _ = resolve_config(cli.config_path, cli.overrides)
    cfg.validate()
    entries = load_checkpoint(cli.options["checkpoint"])
    split = cli.options["split"]
    train_ds, val_ds = resolve_datasets(cfg.data)
    dataset = train_ds if split == "train" else val_ds
    net = build_network(cfg, train_ds.images.shape[1:],
                        train_ds.class_count, np.random.default_rng(0))
    for key in net.params:
        saved = entries.get(f"param/{key}")
        if saved is None or saved.shape != net.params[key].shape:
            raise FormatError(
                f"checkpoint does not match the configured network "
                f"(parameter {key})")
        net.params[key] = saved
    acc, loss = evaluate(net, dataset,
                         transform=normalization_transform(cfg.data))
    print(f"eval: {split} accuracy {acc:.4f}, loss {loss:.4f} "
          f"({len(dataset)} samples)")
    return EXIT_OK


def _flipped_fc(*args, **kwargs):
    return -exact_grad_fc(*args, **kwargs)


def _flipped_conv(*args, **kwargs):
    return -exact_grad_conv(*args, **kwargs)


def run_gradcheck(cli: CliConfig, fc_grad=None, conv_grad=None) -> int:
    """Finite-difference verification of the analytic gradients.

    ``fc_grad``/``conv_grad`` swap in alternative gradient functions; the
    --self-test flag uses sign-flipped ones and passes only if every suite
    catches the planted bug.
    """
    opts = cli.options
    if opts["self_test"]:
        caught = []
        for name, fn, flipped in (
                ("fc", run_fc_suite, _flipped_fc),
                ("conv", run_conv_suite, _flipped_conv)):
            res = fn(instances=5, seed=1000 + opts["seed"], grad_fn=flipped)
            caught.append(not res.ok(opts["tol"]))
            state = "caught" if caught[-1] else "MISSED"
            print(f"self-test {name}: sign-flip bug {state} "
                  f"(max rel err {res.max_rel_err:.3e})")
        if all(caught):
            print("self-test: ok")
            return EXIT_OK
        return EXIT_VERIFY

    suites = [
        run_fc_suite(instances=opts["instances"], seed=1000 + opts["seed"],
                     grad_fn=fc_grad or exact_grad_fc),
        run_conv_suite(instances=opts["instances"], seed=2000 + opts["seed"],
                       grad_fn=conv_grad or exact_grad_conv),
        run_backprop_suite(instances=opts["instances"],
                           seed=3000 + opts["seed"]),
    ]
    failed = []
    for res in suites:
        verdict = f"<{opts['tol']:g}" if res.ok(opts["tol"]) else "FAILED"
        print(f"{res.name}: max rel err {res.max_rel_err:.3e} {verdict} "
              f"({res.instances} instances, {res.checked} coords, "
              f"{res.skipped} skipped)")
        if not res.ok(opts["tol"]):
            failed.append(res)
    if failed:
        for res in failed:
            print(f"{res.name}: worst instance seed {res.worst_seed}")
        return EXIT_VERIFY
    print(f"gradcheck: all suites below {opts['tol']:g}")
    return EXIT_OK


def _parse_hw(text: str):
    try:
        h, w = (int(tok) for tok in text.split(","))
    except ValueError as exc:
        raise ConfigError(
            f"--shape expects 'H,W' integers, got {text!r}") from exc
    if h < 1 or w < 1:
        raise ConfigError(f"--shape dims must be >= 1, got {text!r}")
    return h, w


def block_shape_histogram(masks) -> Counter:
    """Bounding-box shapes of 4-connected dropped regions, as 'HxW' keys."""
    counts = Counter()
    maps = masks.reshape(-1, masks.shape[-2], masks.shape[-1])
    for grid in maps:
        seen = np.zeros(grid.shape, dtype=bool)
        for r in range(grid.shape[0]):
            for c in range(grid.shape[1]):
                if grid[r, c] == 0 or seen[r, c]:
                    continue
                stack = [(r, c)]
                seen[r, c] = True
                rows, cols = [], []
                while stack:
                    cr, cc = stack.pop()
                    rows.append(cr)
                    cols.append(cc)
                    for nr, nc in ((cr - 1, cc), (cr + 1, cc),
                                   (cr, cc - 1), (cr, cc + 1)):
                        if (0 <= nr < grid.shape[0]
                                and 0 <= nc < grid.shape[1]
                                and grid[nr, nc] != 0 and not seen[nr, nc]):
                            seen[nr, nc] = True
                            stack.append((nr, nc))
                height = max(rows) - min(rows) + 1
                width = max(cols) - min(cols) + 1
                counts[f"{height}x{width}"] += 1
    return counts


def run_mask_stats(cli: CliConfig) -> int:
    opts = cli.options
    p, kind = opts["p"], opts["kind"]
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"--p must be in [0, 1), got {p}")
    h, w = _parse_hw(opts["shape"])
    rng = np.random.default_rng(opts["seed"])
    maps = max(1, opts["draws"] // (h * w))
    if kind == "element":
        mask = sample_element_mask((maps, 1, h, w), p, rng)
    else:
        mask = sample_block_mask((maps, 1, h, w), p, opts["block_size"], rng)
    total = mask.size
    fraction = int(mask.sum()) / total
    print(f"mask-stats: kind={kind} p={p:g} shape={h}x{w} "
          f"maps={maps} cells={total}")
    print(f"mask-stats: drop fraction {fraction:.6f} (target {p:g})")
    sample = min(maps, opts["histogram_maps"])
    hist = block_shape_histogram(mask[:sample])
    if hist:
        print(f"mask-stats: block-shape histogram (first {sample} maps)")
        for shape_key, count in sorted(
                hist.items(),
                key=lambda item: (-item[1], item[0])):
            print(f"  {shape_key:>7}: {count}")
    else:
        print("mask-stats: block-shape histogram empty (nothing dropped)")
    if kind == "element" and p > 0.0:
        sigma = float(np.sqrt(p * (1.0 - p) / total))
        nsig = abs(fraction - p) / sigma
        print(f"mask-stats: deviation {nsig:.2f} sigma "
              f"(binomial sigma {sigma:.2e}, gate 4.0)")
        if nsig > 4.0:
            print("mask-stats: FAILED 4-sigma binomial gate")
            return EXIT_VERIFY
    return EXIT_OK


def _final_accs_from_csv(path: str):
    """(train accuracy, test accuracy) from the last epoch row of a log."""
    with open(path, "r") as fh:
        lines = fh.read().splitlines()
    header = lines[0].split(",")
    val_col = header.index("val_acc")
    train_col = header.index("train_eval_acc")
    for line in reversed(lines[1:]):
        cells = line.split(",")
        if cells[val_col] and cells[train_col]:
            return float(cells[train_col]), float(cells[val_col])
    raise FormatError(f"{path}: no epoch summary row found")


def _aggregate(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def run_compare(cli: CliConfig) -> int:
    cfg, copts = resolve_config(cli.config_path, cli.overrides)
    regs = [tok.strip() for tok in copts["regularizers"].split(",")
            if tok.strip()]
    try:
        seeds = [int(tok) for tok in copts["seeds"].split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(
            f"compare.seeds must be comma-separated ints, got "
            f"{copts['seeds']!r}") from exc
    if len(regs) < 2:
        raise ConfigError(
            f"compare.regularizers must list at least two of {REGULARIZERS}")
    for reg in regs:
        if reg not in REGULARIZERS:
            raise ConfigError(
                f"compare.regularizers entry {reg!r} not in {REGULARIZERS}")
    if not seeds:
        raise ConfigError("compare.seeds must list at least one seed")

    out_dir = cli.out_dir or _default_out_dir(f"compare-{cfg.preset}")
    os.makedirs(out_dir, exist_ok=True)
    write_snapshot(out_dir, cfg, copts)

    rows = []
    any_failed = False
    for reg in regs:
        accs, gaps, failed = [], [], 0
        for seed in seeds:
            cell_cfg = copy.deepcopy(cfg)
            cell_cfg.regularizer = reg
            cell_cfg.seed = seed
            cell_dir = os.path.join(out_dir, "cells", f"{reg}-s{seed}")
            os.makedirs(cell_dir, exist_ok=True)
            write_snapshot(cell_dir, cell_cfg)
            try:
                train(cell_cfg, out_dir=cell_dir)
                train_acc, test_acc = _final_accs_from_csv(
                    os.path.join(cell_dir, "metrics.csv"))
            except (ConfigError, FormatError, NumericError,
                    TrainingDiverged) as exc:
                print(f"compare: cell {reg} seed {seed} FAILED: {exc}")
                failed += 1
                any_failed = True
                continue
            accs.append(test_acc)
            gaps.append(train_acc - test_acc)
            print(f"compare: cell {reg} seed {seed} "
                  f"test acc {test_acc:.4f} gap {train_acc - test_acc:.4f}")
        if accs:
            mean_acc, std_acc = _aggregate(accs)
            mean_gap, std_gap = _aggregate(gaps)
        else:
            mean_acc = std_acc = mean_gap = std_gap = float("nan")
        rows.append((reg, len(seeds), failed,
                     mean_acc, std_acc, mean_gap, std_gap))

    csv_lines = ["regularizer,cells,failed,mean_test_acc,std_test_acc,"
                 "mean_gap,std_gap"]
    for reg, cells, failed, ma, sa, mg, sg in rows:
        csv_lines.append(f"{reg},{cells},{failed},{repr(ma)},{repr(sa)},"
                         f"{repr(mg)},{repr(sg)}")
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        fh.write("\n".join(csv_lines) + "\n")

    name_w = max(len("regularizer"), max(len(r[0]) for r in rows))
    text_lines = [f"{'regularizer':<{name_w}}  {'test acc':>19}  "
                  f"{'train-test gap':>19}  {'cells':>5}  {'failed':>6}"]
    for reg, cells, failed, ma, sa, mg, sg in rows:
        acc_txt = f"{ma:.4f} +/- {sa:.4f}" if np.isfinite(ma) else "all failed"
        gap_txt = f"{mg:.4f} +/- {sg:.4f}" if np.isfinite(mg) else "-"
        text_lines.append(f"{reg:<{name_w}}  {acc_txt:>19}  {gap_txt:>19}  "
                          f"{cells:>5}  {failed:>6}")
    summary_txt = "\n".join(text_lines) + "\n"
    with open(os.path.join(out_dir, "summary.txt"), "w", newline="") as fh:
        fh.write(summary_txt)
    print(summary_txt, end="")
    print(f"compare: summary in {out_dir}")
    return EXIT_VERIFY if any_failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="disoutlab",
        description="Feature-map distortion training laboratory.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--set", action="append", default=[],
                       metavar="KEY=VALUE",
                       help="override a config key (repeatable)")

    p_train = sub.add_parser("train", help="train a model and log metrics")
    add_config_args(p_train)
    p_train.add_argument("--out", help=f"output directory (default under "
                                       f"${OUT_ENV} or ./runs)")
    p_train.add_argument("--resume", help="checkpoint to continue from")
    p_train.add_argument("--checkpoint-every", type=int, default=0,
                         metavar="N", help="checkpoint every N epochs")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    add_config_args(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=("train", "val"), default="val")

    p_grad = sub.add_parser("gradcheck",
                            help="finite-difference gradient verification")
    p_grad.add_argument("--instances", type=int, default=100)
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--tol", type=float, default=1e-5)
    p_grad.add_argument("--self-test", action="store_true",
                        help="verify the harness catches a sign-flip bug")

    p_mask = sub.add_parser("mask-stats",
                            help="empirical mask statistics")
    p_mask.add_argument("--p", type=float, default=0.5)
    p_mask.add_argument("--kind", choices=("element", "block"),
                        default="element")
    p_mask.add_argument("--block-size", type=int, default=3)
    p_mask.add_argument("--shape", default="16,16", metavar="H,W")
    p_mask.add_argument("--draws", type=int, default=1_000_000,
                        help="total cells to sample")
    p_mask.add_argument("--histogram-maps", type=int, default=200)
    p_mask.add_argument("--seed", type=int, default=0)

    p_cmp = sub.add_parser("compare",
                           help="train a regularizer-by-seed grid")
    add_config_args(p_cmp)
    p_cmp.add_argument("--out")
    return parser


_DISPATCH = {
    "train": run_train,
    "eval": run_eval,
    "gradcheck": run_gradcheck,
    "mask-stats": run_mask_stats,
    "compare": run_compare,
}

_SHARED_FLAGS = ("command", "config", "set", "out")


def cli_config_from_args(args) -> CliConfig:
    options = {key: value for key, value in vars(args).items()
               if key not in _SHARED_FLAGS}
    return CliConfig(
        subcommand=args.command,
        config_path=getattr(args, "config", None),
        overrides=tuple(getattr(args, "set", None) or ()),
        out_dir=getattr(args, "out", None),
        options=options)


def main(argv=None) -> int:
    cli = cli_config_from_args(build_parser().parse_args(argv))
    try:
        return _DISPATCH[cli.subcommand](cli)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except FormatError as exc:
        print(f"file format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
