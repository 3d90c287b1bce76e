"""Command-line entry point: ``instcal {pretrain,train-instcal,eval,report}``.

Every command reads an optional JSON config (``--config``), applies dotted
overrides (``--set train.lr=0.01`` or the shortcut flags), validates the
result and writes it to ``<out_dir>/resolved_config.json``.  The hash of the
resolved config is stamped into every artifact the command writes.

Exit codes: 0 success, 2 invalid config or input, 3 training diverged.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import harness as H
from . import report as R
from .domains import CORRUPTIONS, KINDS, DomainSpec
from .norm import ConversionError, ConvertMode, convert_model
from .segnet import SegNetConfig
from .shapes import triptych, write_ppm

log = logging.getLogger("instcal")

EXPERIMENTS = ("main", "sweep-m", "batch-stats", "entmin", "aug-grid")
DEFAULT_DOMAINS = ["source", "fog:2", "hue_rotate:2", "contrast:2", "gauss_noise:2", "channel_swap:2"]
# keys that do not influence results and are left out of the config hash
UNHASHED = ("out_dir", "workers", "checkpoint", "log_every")


class ConfigError(ValueError):
    pass


def _train_dict(cfg: H.TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d.pop("seed")
    return d


def default_config(command: str, variant: str = "u") -> dict:
    base = {"seed": 0, "precision": "f64", "out_dir": f"runs/{command}", "log_every": 0}
    if command == "pretrain":
        return {**base, "net": SegNetConfig().to_json(), "train": _train_dict(H.PRETRAIN_DEFAULTS)}
    if command == "train-instcal":
        train = H.INSTCAL_C_DEFAULTS if variant == "c" else H.INSTCAL_U_DEFAULTS
        return {**base, "checkpoint": None, "variant": variant, "basis": 8, "train": _train_dict(train)}
    if command == "eval":
        return {**base, "checkpoint": None, "experiment": "main", "domains": list(DEFAULT_DOMAINS),
                "n_images": 200, "workers": 0, "dump_masks": 0,
                "m_values": list(H.DEFAULT_M_VALUES), "batch_sizes": list(H.DEFAULT_BATCH_SIZES),
                "entmin": {"steps": 1, "lr": 1e-3},
                "grid": {"strategies": list(H.AUGMENTATIONS), "variant": "u",
                         "pretrain": _train_dict(H.PRETRAIN_DEFAULTS),
                         "calibration": _train_dict(H.INSTCAL_U_DEFAULTS)}}
    raise ConfigError(f"unknown command {command!r}")


# keys a user-supplied config file must spell out
REQUIRED = {
    "pretrain": ("train.lr", "train.total_iters", "train.batch_size"),
    "train-instcal": ("checkpoint", "train.lr", "train.total_iters"),
    "eval": ("checkpoint", "experiment"),
}


# ---------------------------------------------------------------------------
# config plumbing


def _get(cfg: dict, dotted: str):
    cur = cfg
    for part in dotted.split("."):
        if not isinstance(cur, dict) or part not in cur:
            raise KeyError(dotted)
        cur = cur[part]
    return cur


def _set(cfg: dict, dotted: str, value, known: dict) -> None:
    parts = dotted.split(".")
    cur, ref = cfg, known
    for part in parts[:-1]:
        if not isinstance(ref, dict) or part not in ref:
            raise ConfigError(f"unknown config key {dotted!r}")
        cur = cur.setdefault(part, {})
        ref = ref[part]
    if not isinstance(ref, dict) or parts[-1] not in ref:
        raise ConfigError(f"unknown config key {dotted!r}")
    cur[parts[-1]] = value


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _check_known(cfg: dict, known: dict, prefix: str = "") -> None:
    for k, v in cfg.items():
        key = prefix + k
        if k not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(v, dict) and isinstance(known[k], dict) and k not in ("net",):
            _check_known(v, known[k], key + ".")


def _fill(cfg: dict, defaults: dict) -> dict:
    out = copy.deepcopy(defaults)
    for k, v in cfg.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "net":
            out[k] = _fill(v, out[k])
        else:
            out[k] = v
    return out


def resolve_config(command: str, path: str | None, overrides: list[tuple[str, object]],
                   variant: str | None = None) -> dict:
    """Defaults, then the config file, then ``INSTCAL_SEED``, then flag overrides."""
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        v = variant or user.get("variant", "u")
        defaults = default_config(command, v)
        _check_known(user, defaults)
        given = dict(overrides)
        for key in REQUIRED[command]:
            try:
                _get(user, key)
            except KeyError:
                if key not in given:
                    raise ConfigError(f"missing required config key {key!r}") from None
        cfg = _fill(user, defaults)
    else:
        defaults = default_config(command, variant or "u")
        cfg = copy.deepcopy(defaults)
    env_seed = os.environ.get("INSTCAL_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"INSTCAL_SEED must be an integer, got {env_seed!r}") from None
    for key, value in overrides:
        _set(cfg, key, value, defaults)
    _validate(command, cfg)
    return cfg


def _train_config(d: dict, seed: int, key: str = "train") -> H.TrainConfig:
    try:
        return H.TrainConfig(**d, seed=seed)
    except TypeError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def parse_domain(item) -> DomainSpec:
    if isinstance(item, dict):
        return DomainSpec.from_json(item)
    text = str(item)
    if text in ("source", "identity"):
        return DomainSpec.identity()
    if ":" in text:
        name, sev = text.split(":", 1)
        if name not in CORRUPTIONS:
            raise ConfigError(f"unknown corruption {name!r} in domains")
        try:
            return DomainSpec.corruption(name, int(sev))
        except ValueError as exc:
            raise ConfigError(f"domains: {exc}") from exc
    if text in KINDS and text != "corruption":
        return DomainSpec(text)
    raise ConfigError(f"cannot parse domain {text!r}; use e.g. 'source' or 'fog:2'")


def _validate(command: str, cfg: dict) -> None:
    if not isinstance(cfg.get("seed"), int):
        raise ConfigError("seed must be an integer")
    if cfg.get("precision") not in ("f32", "f64"):
        raise ConfigError("precision must be 'f32' or 'f64'")
    if command in ("pretrain", "train-instcal"):
        _train_config(cfg["train"], cfg["seed"])
    if command == "pretrain":
        try:
            SegNetConfig.from_json(cfg["net"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"net: {exc}") from exc
    if command == "train-instcal":
        if cfg["variant"] not in ("u", "c"):
            raise ConfigError(f"variant must be 'u' or 'c', not {cfg['variant']!r}")
        if not isinstance(cfg["basis"], int) or cfg["basis"] < 1:
            raise ConfigError("basis must be a positive integer")
    if command in ("train-instcal", "eval") and not cfg.get("checkpoint"):
        raise ConfigError("missing required config key 'checkpoint'")
    if command == "eval":
        if cfg["experiment"] not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {cfg['experiment']!r}; choose from {', '.join(EXPERIMENTS)}")
        [parse_domain(d) for d in cfg["domains"]]
        if not isinstance(cfg["n_images"], int) or cfg["n_images"] < 1:
            raise ConfigError("n_images must be a positive integer")
        grid = cfg["grid"]
        for s in grid["strategies"]:
            if s not in H.AUGMENTATIONS:
                raise ConfigError(f"grid.strategies: unknown augmentation {s!r}")
        _train_config(grid["pretrain"], cfg["seed"], "grid.pretrain")
        _train_config(grid["calibration"], cfg["seed"], "grid.calibration")


def _checkpoint_digests(cfg: dict) -> dict:
    paths = cfg.get("checkpoint")
    if paths is None:
        return {}
    paths = paths if isinstance(paths, list) else [paths]
    out = {}
    for i, p in enumerate(paths):
        try:
            out[str(i)] = hashlib.sha256(Path(p).read_bytes()).hexdigest()
        except OSError as exc:
            raise ConfigError(f"cannot read checkpoint {p}: {exc}") from exc
    return out


def stamp(cfg: dict) -> str:
    """Hash of the result-relevant part of a resolved config."""
    relevant = {k: v for k, v in cfg.items() if k not in UNHASHED}
    relevant["checkpoint_sha256"] = _checkpoint_digests(cfg)
    return H.config_hash(relevant)


def _write_resolved(out: Path, command: str, cfg: dict, digest: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config_hash": digest, "config": cfg}
    (out / "resolved_config.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _write_curve(path: Path, res: H.TrainResult, digest: str) -> None:
    path.write_text(f"# config_hash: {digest}\n" + res.curve_csv())


def _load(path: str):
    try:
        return ckpt.load(path)
    except (OSError, ckpt.CheckpointError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load checkpoint {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(cfg: dict) -> int:
    digest = stamp(cfg)
    out = Path(cfg["out_dir"])
    _write_resolved(out, "pretrain", cfg, digest)
    res = H.pretrain(_train_config(cfg["train"], cfg["seed"]), SegNetConfig.from_json(cfg["net"]),
                     cfg["log_every"])
    ckpt.save(out / "model.ckpt", res.model, {"config_hash": digest, "stage": "pretrain"})
    _write_curve(out / "curve.csv", res, digest)
    log.info("wrote %s", out / "model.ckpt")
    return 0


def cmd_train_instcal(cfg: dict) -> int:
    digest = stamp(cfg)
    out = Path(cfg["out_dir"])
    model, _ = _load(cfg["checkpoint"])
    try:
        conv = H.convert_for(model, cfg["variant"], cfg["basis"], seed=cfg["seed"])
    except ConversionError as exc:
        raise ConfigError(f"checkpoint cannot be converted: {exc}") from exc
    _write_resolved(out, "train-instcal", cfg, digest)
    res = H.train_instcal(conv, _train_config(cfg["train"], cfg["seed"]), cfg["log_every"])
    ckpt.save(out / "model.ckpt", res.model, {"config_hash": digest, "stage": "instcal"})
    _write_curve(out / "curve.csv", res, digest)
    log.info("wrote %s", out / "model.ckpt")
    return 0


def _models_for_main(paths: list[str]):
    loaded = [_load(p)[0] for p in paths]
    base = H.backbone(loaded[0])
    for m in loaded[1:]:
        if ckpt.model_bytes(H.backbone(m)) != ckpt.model_bytes(base):
            raise ConfigError("checkpoints in one 'main' run must share the same pretrained backbone")
    models = [base, convert_model(base, ConvertMode.manual(0.1))]
    models += [m for m in loaded if m.config.norm != "bn"]
    return models


def _dump_masks(out: Path, method: str, domains, preds: dict, n: int, seed: int, digest: str) -> None:
    folder = out / "masks" / method
    folder.mkdir(parents=True, exist_ok=True)
    for d in domains:
        images, masks = H.eval_set(d, n, seed)
        label = f"{d.label}-{d.severity}" if d.severity else d.label
        for i in range(n):
            write_ppm(folder / f"{label}-{i:03d}.ppm", triptych(images[i], masks[i], preds[d][i]),
                      comment=f"config_hash {digest}")


def cmd_eval(cfg: dict) -> int:
    digest = stamp(cfg)
    out = Path(cfg["out_dir"])
    paths = cfg["checkpoint"] if isinstance(cfg["checkpoint"], list) else [cfg["checkpoint"]]
    domains = [parse_domain(d) for d in cfg["domains"]]
    workers = cfg["workers"] or (os.cpu_count() or 1)
    n, seed, exp = cfg["n_images"], cfg["seed"], cfg["experiment"]
    kw = dict(n_images=n, seed=seed, config_hash=digest)
    reports: list[H.MetricsReport] = []
    if exp == "main":
        models = _models_for_main(paths)
        _write_resolved(out, "eval", cfg, digest)
        for m in models:
            preds: dict = {}
            reports += H.evaluate(m, domains, workers=workers, predictions=preds, **kw)
            if cfg["dump_masks"]:
                _dump_masks(out, H.method_name(m), domains, preds, min(cfg["dump_masks"], n), seed, digest)
    else:
        model, _ = _load(paths[0])
        _write_resolved(out, "eval", cfg, digest)
        if exp == "sweep-m":
            reports = H.sweep_manual_m(H.backbone(model), domains, cfg["m_values"], workers=workers, **kw)
        elif exp == "batch-stats":
            if model.config.norm == "bn":
                raise ConfigError("batch-stats needs a calibrated checkpoint")
            reports = H.batch_stats_experiment(model, domains, cfg["batch_sizes"], **kw)
        elif exp == "entmin":
            e = cfg["entmin"]
            reports = H.evaluate(model, domains, workers=workers, **kw)
            reports += H.evaluate_entropy_min(model, domains, e["steps"], e["lr"], workers=workers, **kw)
        elif exp == "aug-grid":
            g = cfg["grid"]
            reports = H.augmentation_grid(
                H.backbone(model), domains, _train_config(g["pretrain"], seed, "grid.pretrain"),
                _train_config(g["calibration"], seed, "grid.calibration"), g["strategies"],
                g["variant"], workers=workers, **kw)
    (out / "reports.csv").write_text(R.to_csv(reports))
    (out / "reports.json").write_text(R.to_json(reports))
    (out / "table.md").write_text(R.markdown_table(reports) + f"\n<!-- config_hash: {digest} -->\n")
    log.info("wrote %d report rows to %s", len(reports), out)
    return 0


def cmd_report(path: str, metric: str, out: str | None) -> int:
    try:
        reports = R.load_reports(path)
        table = R.markdown_table(reports, metric)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot read reports from {path}: {exc}") from exc
    except R.InconsistentReports as exc:
        raise ConfigError(str(exc)) from exc
    if out:
        Path(out).write_text(table)
    sys.stdout.write(table)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. train.lr=0.01 (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="instcal", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train a BatchNorm network on the source domain")
    _add_common(p)
    p.add_argument("--total-iters", type=int, dest="train.total_iters")
    p.add_argument("--lr", type=float, dest="train.lr")
    p.add_argument("--batch-size", type=int, dest="train.batch_size")
    p.add_argument("--aug", dest="train.augmentation")
    p.add_argument("--log-every", type=int, dest="log_every")

    p = sub.add_parser("train-instcal", help="convert a pretrained network and train its calibration")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--variant")
    p.add_argument("--aug", dest="train.augmentation")
    p.add_argument("--basis", type=int)
    p.add_argument("--total-iters", type=int, dest="train.total_iters")
    p.add_argument("--lr", type=float, dest="train.lr")
    p.add_argument("--log-every", type=int, dest="log_every")

    p = sub.add_parser("eval", help="run an evaluation experiment")
    _add_common(p)
    p.add_argument("--checkpoint", action="append", help="repeat to evaluate several calibrated models")
    p.add_argument("--experiment")
    p.add_argument("--domains", help="comma list, e.g. source,fog:2,contrast:2")
    p.add_argument("--n-images", type=int, dest="n_images")
    p.add_argument("--workers", type=int)
    p.add_argument("--dump-masks", type=int, dest="dump_masks", metavar="N",
                   help="write N input/truth/prediction triptychs per model and domain (main only)")

    p = sub.add_parser("report", help="aggregate report JSON files into a markdown table")
    p.add_argument("results", help="report JSON file or directory")
    p.add_argument("--metric", choices=("miou", "ece"), default="miou")
    p.add_argument("--output", help="also write the table to this file")
    return parser


_NOT_CONFIG = {"command", "config", "set", "verbose", "results", "metric", "output"}


def _overrides(args: argparse.Namespace) -> list[tuple[str, object]]:
    out = []
    for key, value in vars(args).items():
        if key in _NOT_CONFIG or value is None:
            continue
        if key == "checkpoint" and isinstance(value, list):
            value = value[0] if len(value) == 1 else value
        if key == "domains":
            value = [v for v in value.split(",") if v]
        out.append((key, value))
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out.append((k.strip(), _parse_value(v)))
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.results, args.metric, args.output)
        cfg = resolve_config(args.command, args.config, _overrides(args), getattr(args, "variant", None))
        ad.set_default_dtype(np.float32 if cfg["precision"] == "f32" else np.float64)
        handler = {"pretrain": cmd_pretrain, "train-instcal": cmd_train_instcal, "eval": cmd_eval}
        with np.errstate(over="ignore", invalid="ignore"):
            return handler[args.command](cfg)
    except ConfigError as exc:
        print(f"instcal: error: {exc}", file=sys.stderr)
        return 2
    except H.TrainingDiverged as exc:
        print(f"instcal: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
