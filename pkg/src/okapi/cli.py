"""``okapi`` command-line front end.

Every option can also come from a TOML file given with ``--config``: top-level
keys apply to every subcommand and a table named after the subcommand (e.g.
``[match]``) overrides them. Keys are the long flag names with ``-`` or ``_``.
Resolution order is flag, then config file, then ``OKAPI_SEED`` (seed only),
then the built-in default. stdout only ever carries JSON or CSV.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path
from typing import Any, Callable, Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .core import (
    ConfigError,
    FileFormat,
    FormatError,
    OkapiError,
    ValidationError,
    load_embeddings,
    load_matches,
    match_summary,
    save_embeddings,
    save_matches,
)
from .diagnostics import EmptyGridAfterFilter, GridSpec, NoMatches, domain_balance, grid_search, grid_to_csv, matched_balance
from .matcher import CaliperParams, Direction, matched_samples
from .online import QuerySource
from .propensity import PropensityModel, fit_embedding_set
from .toytrain import SynthConfig, TrainConfig, Trainer, compare, gen_synth, history_to_csv

EXIT_OK = 0
EXIT_IO = 1
EXIT_VALIDATION = 2
EXIT_EMPTY = 3
EXIT_USAGE = 64

SEED_ENV = "OKAPI_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_float(text) -> float:
    """Float parser that accepts ``inf`` (any case) for disabled calipers."""
    if isinstance(text, (int, float)):
        return float(text)
    try:
        return float(text.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def parse_float_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [parse_float(v) for v in text]
    parts = [p for p in str(text).split(",") if p.strip()]
    if not parts:
        raise argparse.ArgumentTypeError("empty list")
    return [parse_float(p) for p in parts]


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


# name -> (type, default, help); ``None`` default with required=True is checked after merging
Option = tuple[Callable[[Any], Any], Any, str]

COMMON: dict[str, Option] = {
    "seed": (int, 0, "random seed (falls back to $OKAPI_SEED)"),
    "threads": (int, None, "matching worker threads (default: all cores)"),
}

CALIPER: dict[str, Option] = {
    "k": (int, 1, "neighbours per query"),
    "t_fixed": (parse_float, 0.0, "fixed caliper on the propensity score, in [0, 0.5)"),
    "t_std": (parse_float, math.inf, "std caliper multiplier; inf disables it"),
    "tau": (parse_float, 1.0, "propensity temperature"),
}

SCORER: dict[str, Option] = {
    "model": (str, None, "propensity model JSON; fitted on the input when omitted"),
    "save_model": (str, None, "write the fitted propensity model here"),
    "ps_epochs": (int, 500, "full-batch epochs when fitting the propensity model"),
    "ps_lr": (parse_float, 0.5, "learning rate when fitting the propensity model"),
    "labels": (str, "auto", "domain labels for matching: split, domains or auto"),
    "direction": (str, "both", "l2u, u2l, both or all"),
    "format": (str, None, "embedding file format: binary or csv (default: by extension)"),
}

SUBCOMMANDS: dict[str, dict[str, Any]] = {
    "match": {
        "help": "match samples across domains and write JSONL records",
        "required": ("embeddings", "out"),
        "options": {
            "embeddings": (str, None, "input embedding file"),
            "out": (str, None, "output JSONL path"),
            **CALIPER,
            **SCORER,
        },
    },
    "diagnose": {
        "help": "covariate balance before and after matching",
        "required": ("embeddings",),
        "options": {
            "embeddings": (str, None, "input embedding file"),
            "matches": (str, None, "JSONL match records to evaluate"),
            "labels": SCORER["labels"],
            "format": SCORER["format"],
        },
    },
    "gridsearch": {
        "help": "rank caliper settings by matched balance",
        "required": ("embeddings",),
        "options": {
            "embeddings": (str, None, "input embedding file"),
            "t_fixed_values": (parse_float_list, [0.0, 0.01, 0.05, 0.1], "comma-separated t_fixed grid"),
            "t_std_values": (parse_float_list, [0.1, 0.2, 0.5, 1.0, math.inf], "comma-separated t_std grid"),
            "tau_values": (parse_float_list, [1.0, 2.0, 5.0], "comma-separated tau grid"),
            "k": CALIPER["k"],
            "min_retention": (parse_float, 0.0, "drop cells retaining fewer queries than this fraction"),
            "out": (str, None, "write the CSV here instead of stdout"),
            **SCORER,
        },
    },
    "synth": {
        "help": "write the rotated-Gaussian synthetic dataset",
        "required": ("out_dir",),
        "options": {
            "out_dir": (str, None, "output directory"),
            "format": (str, "binary", "binary or csv"),
            "n_domains": (int, 4, "training domains"),
            "samples_per_domain": (int, 200, "training samples per domain"),
            "test_samples_per_domain": (int, 200, "test samples per domain"),
            "labeled_domains": (lambda v: [int(x) for x in parse_float_list(v)], [0, 1], "comma-separated labelled domains"),
            "rotation": (parse_float, math.pi / 8, "rotation between consecutive domains (radians)"),
            "n_ood_domains": (int, 2, "held-out domains continuing the rotation"),
        },
    },
    "train-demo": {
        "help": "train the toy model with ERM or online matching",
        "required": (),
        "options": {
            "method": (str, "okapi", "erm or okapi"),
            "steps": (int, 1500, "SGD steps"),
            "batch_size": (int, 64, "minibatch size"),
            "lr": (parse_float, 0.1, "SGD learning rate"),
            "lambda_final": (parse_float, 1.0, "final consistency weight"),
            "warmup_fraction": (parse_float, 0.1, "fraction of steps spent ramping the consistency weight"),
            "zeta_start": (parse_float, 0.99, "initial EMA decay"),
            "zeta_end": (parse_float, 1.0, "final EMA decay"),
            "bank_capacity": (int, 256, "memory bank size"),
            "query_source": (str, "target", "target or online"),
            "eval_every": (int, 100, "steps between metric rows"),
            "metrics": (str, None, "write the metrics CSV here"),
            "compare": (parse_bool, False, "run both methods on paired seeds"),
            "seeds": (int, 5, "number of paired seeds for --compare, starting at --seed"),
            "rotation": (parse_float, math.pi / 8, "rotation between consecutive domains (radians)"),
            "samples_per_domain": (int, 200, "training samples per domain"),
            **CALIPER,
            "t_std": (parse_float, 1.0, "std caliper multiplier; inf disables it"),
        },
    },
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="okapi", description="Caliper-filtered cross-domain matching tools.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    parser.subparsers = {}
    for name, entry in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=entry["help"], description=entry["help"])
        parser.subparsers[name] = p
        p.add_argument("--config", help="TOML file supplying option values")
        for opt, (typ, default, help_) in {**entry["options"], **COMMON}.items():
            shown = "" if default is None else f" [default: {default}]"
            if typ is parse_bool:
                p.add_argument(_flag(opt), nargs="?", const=True, type=parse_bool, default=None, help=help_ + shown)
            else:
                p.add_argument(_flag(opt), type=typ, default=None, help=help_ + shown)
    return parser


def _load_config(path: str, command: str) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"bad TOML in {path}: {exc}") from None
    flat = {k.replace("-", "_"): v for k, v in raw.items() if not isinstance(v, dict)}
    section = raw.get(command, {})
    if not isinstance(section, dict):
        raise ConfigError(f"[{command}] must be a table")
    flat.update({k.replace("-", "_"): v for k, v in section.items()})
    return flat


def resolve(command: str, ns: argparse.Namespace, env=os.environ) -> dict:
    """Merge flags, config file, environment and defaults into one dict."""
    entry = SUBCOMMANDS[command]
    options = {**entry["options"], **COMMON}
    cfg = _load_config(ns.config, command) if ns.config else {}
    unknown = set(cfg) - set(options) - {n.replace("-", "_") for n in SUBCOMMANDS}
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    out = {}
    for opt, (typ, default, _) in options.items():
        flag_val = getattr(ns, opt)
        if flag_val is not None:
            out[opt] = flag_val
        elif opt in cfg:
            try:
                out[opt] = typ(cfg[opt])
            except (argparse.ArgumentTypeError, TypeError, ValueError) as exc:
                raise ConfigError(f"config key {opt}: {exc}") from None
        elif opt == "seed" and env.get(SEED_ENV):
            try:
                out[opt] = int(env[SEED_ENV])
            except ValueError:
                raise ConfigError(f"${SEED_ENV} must be an integer") from None
        else:
            out[opt] = default
    if out["threads"] is None:
        out["threads"] = os.cpu_count() or 1
    missing = [o for o in entry["required"] if out.get(o) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(_flag(m) for m in missing)}")
    return out


def _echo_config(command: str, opts: dict) -> None:
    def plain(v):
        if isinstance(v, list):
            return [plain(x) for x in v]
        return "inf" if isinstance(v, float) and math.isinf(v) else v

    shown = {k: plain(v) for k, v in opts.items()}
    print(f"okapi {command}: effective config {json.dumps(shown, sort_keys=True)}", file=sys.stderr)


def _emit_json(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _load(opts: dict):
    return load_embeddings(opts["embeddings"], opts.get("format"))


def _use_split(data, labels: str) -> bool:
    if labels == "auto":
        return data.has_targets
    if labels not in ("split", "domains"):
        raise ValidationError(f"--labels must be split, domains or auto, got {labels!r}")
    return labels == "split"


def _scorer(data, opts: dict, binary: bool) -> PropensityModel:
    if opts["model"]:
        return PropensityModel.load(opts["model"])
    model = fit_embedding_set(data, binary, opts["ps_epochs"], opts["ps_lr"], opts["seed"])
    if opts["save_model"]:
        model.save(opts["save_model"])
    return model


def cmd_match(opts: dict) -> int:
    data = _load(opts)
    binary = _use_split(data, opts["labels"])
    params = CaliperParams(opts["t_fixed"], opts["t_std"], opts["tau"])
    model = _scorer(data, opts, binary)
    records = matched_samples(data, model, params, opts["k"], Direction(opts["direction"]), binary, opts["threads"])
    save_matches(records, opts["out"])
    _emit_json(match_summary(records))
    return EXIT_OK


def cmd_diagnose(opts: dict) -> int:
    data = _load(opts)
    labels = data.split_labels() if _use_split(data, opts["labels"]) else data.domains
    out = {"raw": domain_balance(data, labels).to_dict()}
    if opts["matches"]:
        out["matched"] = matched_balance(data, load_matches(opts["matches"]), labels).to_dict()
    _emit_json(out)
    return EXIT_OK


def cmd_gridsearch(opts: dict) -> int:
    data = _load(opts)
    binary = _use_split(data, opts["labels"])
    model = _scorer(data, opts, binary)
    grid = GridSpec(
        opts["t_fixed_values"], opts["t_std_values"], opts["tau_values"],
        opts["k"], opts["min_retention"], Direction(opts["direction"]),
    )
    text = grid_to_csv(grid_search(data, model, grid, binary, opts["threads"]))
    if opts["out"]:
        Path(opts["out"]).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_synth(opts: dict) -> int:
    cfg = SynthConfig(
        n_domains=opts["n_domains"],
        samples_per_domain=opts["samples_per_domain"],
        labeled_domains=tuple(opts["labeled_domains"]),
        rotation_per_domain=opts["rotation"],
        n_ood_domains=opts["n_ood_domains"],
        test_samples_per_domain=opts["test_samples_per_domain"],
        seed=opts["seed"],
    )
    fmt = FileFormat(opts["format"]) if opts["format"] in ("binary", "csv") else None
    if fmt is None:
        raise ValidationError(f"--format must be binary or csv, got {opts['format']!r}")
    data = gen_synth(cfg)
    out_dir = Path(opts["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = ".okpi" if fmt is FileFormat.BINARY else ".csv"
    written = {}
    for name, part in (("train", data.train), ("id_test", data.id_test), ("ood_test", data.ood_test)):
        path = out_dir / f"{name}{ext}"
        save_embeddings(part, path, fmt)
        written[name] = {"path": str(path), "samples": len(part)}
    _emit_json(written)
    return EXIT_OK


def _train_config(opts: dict) -> TrainConfig:
    if opts["method"] not in ("erm", "okapi"):
        raise ValidationError(f"--method must be erm or okapi, got {opts['method']!r}")
    return TrainConfig(
        total_steps=opts["steps"],
        batch_size=opts["batch_size"],
        lr=opts["lr"],
        k=opts["k"],
        caliper=CaliperParams(opts["t_fixed"], opts["t_std"], opts["tau"]),
        zeta_start=opts["zeta_start"],
        zeta_end=opts["zeta_end"],
        lambda_final=opts["lambda_final"],
        warmup_fraction=opts["warmup_fraction"],
        bank_capacity=opts["bank_capacity"],
        query_source=QuerySource(opts["query_source"]),
        seed=opts["seed"],
        eval_every=opts["eval_every"],
        threads=opts["threads"],
    )


def cmd_train_demo(opts: dict) -> int:
    try:
        cfg = _train_config(opts)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    synth = SynthConfig(samples_per_domain=opts["samples_per_domain"], rotation_per_domain=opts["rotation"], seed=opts["seed"])
    if opts["compare"]:
        seeds = range(opts["seed"], opts["seed"] + opts["seeds"])
        _emit_json(compare(synth, cfg, seeds))
        return EXIT_OK
    tr = Trainer(gen_synth(synth), cfg, opts["method"]).run()
    if opts["metrics"]:
        Path(opts["metrics"]).write_text(history_to_csv(tr.history))
    final = tr.history[-1]
    _emit_json({"method": opts["method"], "steps": tr.step_count, "id_acc": final["id_acc"], "ood_acc": final["ood_acc"]})
    return EXIT_OK


HANDLERS = {
    "match": cmd_match,
    "diagnose": cmd_diagnose,
    "gridsearch": cmd_gridsearch,
    "synth": cmd_synth,
    "train-demo": cmd_train_demo,
}


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # --help and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if not ns.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        opts = resolve(ns.command, ns)
        _echo_config(ns.command, opts)
        return HANDLERS[ns.command](opts)
    except UsageError as exc:
        parser.subparsers[ns.command].print_usage(sys.stderr)
        print(f"okapi {ns.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NoMatches, EmptyGridAfterFilter) as exc:
        print(f"okapi {ns.command}: empty result: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (OSError, FormatError) as exc:
        print(f"okapi {ns.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValidationError, ValueError) as exc:
        print(f"okapi {ns.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OkapiError as exc:
        print(f"okapi {ns.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
