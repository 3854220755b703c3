"""Command-line front end: run / sweep / compare / selftest.

Config files are flat ``key = value`` lines (``#`` comments, blank lines
allowed); sections are expressed with dotted keys, e.g.::

    optimizer.name = stable_spam
    quant.format = int4
    schedule.total_steps = 2000

Every key is optional; unset keys take the documented defaults (Adam, no
quantization, peak LR 1e-3). Unknown keys, type mismatches, and constraint
violations are reported with the key name and line number.

Exit codes: 0 success, 1 config error, 2 divergence-only (every run
diverged), 3 internal error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict, replace

from . import harness, selftest
from .harness import (ConfigError, LR_GRID_PRESETS, OptimizerConfig,
                      RunConfig, run, sweep)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_INTERNAL = 3


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def _bool(text: str) -> bool:
    if text.lower() in ("true", "1", "yes"):
        return True
    if text.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _str_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


# key -> ((section, attr), converter); section None means top-level RunConfig.
_SCHEMA = {
    "seed": (("", "seed"), int),
    "model.kind": (("model", "kind"), str),
    "model.input_dim": (("model", "input_dim"), int),
    "model.hidden_dim": (("model", "hidden_dim"), int),
    "model.depth": (("model", "depth"), int),
    "model.classes": (("model", "classes"), int),
    "model.quad_dim": (("model", "quad_dim"), int),
    "data.samples": (("data", "samples"), int),
    "data.batch_size": (("data", "batch_size"), int),
    "quant.format": (("", "quant_format"), str),
    "schedule.lr_peak": (("schedule", "lr_peak"), float),
    "schedule.total_steps": (("schedule", "total_steps"), int),
    "schedule.warmup_steps": (("schedule", "warmup_steps"), int),
    "spike.probability": (("spike", "probability"), float),
    "spike.severity": (("spike", "severity"), float),
    "optimizer.name": (("optimizer", "name"), str),
    "optimizer.beta1": (("optimizer", "beta1"), float),
    "optimizer.beta2": (("optimizer", "beta2"), float),
    "optimizer.eps": (("optimizer", "eps"), float),
    "optimizer.gamma1": (("optimizer", "gamma1"), float),
    "optimizer.gamma2": (("optimizer", "gamma2"), float),
    "optimizer.gamma3": (("optimizer", "gamma3"), float),
    "optimizer.reset_interval": (("optimizer", "reset_interval"), int),
    "optimizer.spam_reset_interval": (("optimizer", "spam_reset_interval"), int),
    "optimizer.spam_warmup_steps": (("optimizer", "spam_warmup_steps"), int),
    "optimizer.gss_threshold": (("optimizer", "gss_threshold"), float),
    "optimizer.grad_clip": (("optimizer", "grad_clip"), float),
    "optimizer.transforms": (("optimizer", "transforms"), _str_list),
    "optimizer.weight_decay": (("optimizer", "weight_decay"), float),
    "optimizer.lion_beta1": (("optimizer", "lion_beta1"), float),
    "optimizer.lion_beta2": (("optimizer", "lion_beta2"), float),
    "optimizer.adafactor_eps1": (("optimizer", "adafactor_eps1"), float),
    "optimizer.adafactor_eps2": (("optimizer", "adafactor_eps2"), float),
    "optimizer.adafactor_d": (("optimizer", "adafactor_d"), float),
}


def parse_config_text(text: str, origin: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    seen_grad_clip = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', "
                              f"got {raw.strip()!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{origin}:{lineno}: unknown key '{key}'")
        (section, attr), conv = _SCHEMA[key]
        try:
            parsed = conv(value)
        except ValueError:
            raise ConfigError(f"{origin}:{lineno}: bad value for '{key}': "
                              f"{value!r}") from None
        if key == "optimizer.grad_clip":
            seen_grad_clip = True
        target = cfg if section == "" else getattr(cfg, section)
        setattr(target, attr, parsed)
    if cfg.optimizer.name == "adam_gradclip" and not seen_grad_clip:
        cfg.optimizer.grad_clip = 1.0
    cfg.validate()
    return cfg


def parse_config(path: str) -> RunConfig:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        text = fh.read()
    return parse_config_text(text, origin=path)


def parse_lr_grid(text: str) -> list[float]:
    """``a:b:step`` inclusive grid, or a named preset."""
    if text in LR_GRID_PRESETS:
        return list(LR_GRID_PRESETS[text])
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"--lr-grid expects 'a:b:step' or a preset name, "
                          f"got {text!r}")
    try:
        lo, hi, step = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"--lr-grid: non-numeric bound in {text!r}") from None
    if step <= 0 or hi < lo:
        raise ConfigError(f"--lr-grid: bad range {text!r}")
    grid = []
    value = lo
    while value <= hi * (1 + 1e-12):
        grid.append(value)
        value += step
    return grid


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _load_cfg(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "run.csv")
    result = run(cfg, records_path=path)
    final = result.final_val_loss
    print(f"steps: {len(result.records)}")
    print(f"diverged: {result.diverged}")
    print(f"final_val_loss: {'diverged' if final is None else final!r}")
    print(f"records: {path}")
    return EXIT_DIVERGED if result.diverged else EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_cfg(args)
    grid = parse_lr_grid(args.lr_grid) if args.lr_grid \
        else list(LR_GRID_PRESETS["step"])
    jobs = args.jobs if args.jobs else min(len(grid), os.cpu_count() or 1)
    result = sweep(cfg, grid, out_dir=args.out, jobs=jobs)
    for entry in result.entries:
        shown = "diverged" if entry.final_loss is None else repr(entry.final_loss)
        print(f"lr={entry.lr:g}\tfinal_loss={shown}")
    print(f"best_lr: {result.best_lr}")
    return EXIT_OK if result.best_lr is not None else EXIT_DIVERGED


def _optimizer_label(cfg: RunConfig) -> str:
    name = cfg.optimizer.name
    if cfg.optimizer.transforms:
        name += "+" + "+".join(cfg.optimizer.transforms)
    return name


def compare_configs(cfgs: list[RunConfig]):
    """Check the configs differ only in the optimizer block."""
    def non_optimizer(cfg):
        d = asdict(cfg)
        d.pop("optimizer")
        return d

    def flatten(d, prefix=""):
        out = {}
        for k, v in d.items():
            if isinstance(v, dict):
                out.update(flatten(v, f"{prefix}{k}."))
            else:
                out[f"{prefix}{k}"] = v
        return out

    reference = flatten(non_optimizer(cfgs[0]))
    for cfg in cfgs[1:]:
        other = flatten(non_optimizer(cfg))
        bad = sorted(k for k in reference if reference[k] != other[k])
        if bad:
            raise ConfigError("compare configs may differ only in the "
                              f"optimizer block; diverging keys: {', '.join(bad)}")


def cmd_compare(args) -> int:
    if len(args.configs) < 2:
        raise ConfigError("compare needs at least two config files")
    cfgs = [parse_config(p) for p in args.configs]
    if args.seed is not None:
        cfgs = [replace(c, seed=args.seed) for c in cfgs]
    compare_configs(cfgs)
    os.makedirs(args.out, exist_ok=True)

    results = []
    for i, cfg in enumerate(cfgs):
        path = os.path.join(args.out, f"compare_run{i}.csv")
        results.append((cfg, run(cfg, records_path=path), path))

    finals = [res.records[-1].loss for _, res, _ in results
              if res.records and not res.diverged]
    target = max(finals) if finals else None

    rows = []
    for cfg, res, path in results:
        if res.diverged or not res.records:
            final_train = final_val = "diverged"
            to_target = "n/a"
        else:
            final_train = repr(res.records[-1].loss)
            final_val = repr(res.final_val_loss)
            to_target = "n/a"
            if target is not None:
                for rec in res.records:
                    if rec.loss <= target:
                        to_target = str(rec.step)
                        break
        rows.append((_optimizer_label(cfg), final_train, final_val,
                     to_target, path))

    header = "optimizer,final_train_loss,final_val_loss,steps_to_target,records_path"
    lines = [header] + [",".join(r) for r in rows]
    harness._atomic_write(os.path.join(args.out, "compare.csv"),
                          "\n".join(lines) + "\n")
    for line in lines:
        print(line)
    if all(res.diverged for _, res, _ in results):
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_selftest(args) -> int:
    report = selftest.run_selftest()
    for name, ok, detail in report:
        status = "PASS" if ok else "FAIL"
        suffix = f" ({detail})" if detail else ""
        print(f"[{status}] {name}{suffix}")
    failed = sum(1 for _, ok, _ in report if not ok)
    print(f"{len(report) - failed}/{len(report)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_INTERNAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stablespam",
        description="Stable-SPAM optimizer experiments at desk scale")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="config file path")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("-v", "--verbose", action="store_true")

    p_run = sub.add_parser("run", help="single training run")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="learning-rate sweep")
    common(p_sweep)
    p_sweep.add_argument("--lr-grid", default=None,
                         help="a:b:step or preset name (wide, step)")
    p_sweep.add_argument("--jobs", type=int, default=0,
                         help="parallel runs (default: grid size, capped)")
    p_sweep.set_defaults(func=cmd_sweep)

    p_cmp = sub.add_parser("compare",
                           help="run configs differing only in optimizer")
    p_cmp.add_argument("configs", nargs="+", help="config files")
    p_cmp.add_argument("--out", default="out")
    p_cmp.add_argument("--seed", type=int, default=None)
    p_cmp.set_defaults(func=cmd_compare)

    p_self = sub.add_parser("selftest", help="run the built-in oracle suite")
    p_self.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
