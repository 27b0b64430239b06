"""Command-line front end: synth | pretrain | adapt | eval | experiment.

Configuration is a flat key=value map. Precedence, lowest to highest:
built-in defaults, --config file, repeated --set key=value, then the
dedicated --seed flag. Unknown keys are rejected. Config files hold one
``key = value`` per line; blank lines and lines starting with '#' are
ignored. Relative path values resolve inside the --out directory.

Exit codes: 0 success, 2 config/usage error, 3 data-format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import (ConfigError, ContractError, DataFormatError,
                     NumericalError)
from .evaluation import (RankingProtocol, attr_accuracy, evaluate_retrieval,
                         protocol_fingerprint)
from .losses import LossVariant
from .networks import default_specs
from .synth import Dataset, DomainShiftSpec, generate_pair, read_csv, write_csv
from .training import (AdaptConfig, PretrainConfig, adapt, load_checkpoint,
                       pretrain_source, save_checkpoint, trace_to_csv)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_choice(*options):
    def parse(text):
        if text not in options:
            raise ConfigError(f"expected one of {options}, got {text!r}")
        return text
    return parse


@dataclass(frozen=True)
class _Key:
    default: object
    parse: Callable
    help: str


KEYS = {
    # synthetic data generation
    "synth.m": _Key(8, int, "attribute count"),
    "synth.d_in": _Key(32, int, "input feature dimension"),
    "synth.shift_rotation_angle": _Key(0.5, float, "domain-shift rotation (radians)"),
    "synth.shift_translation_scale": _Key(1.0, float, "domain-shift translation magnitude"),
    "synth.noise_sigma": _Key(0.3, float, "per-sample noise / camera-offset scale"),
    "synth.n_source": _Key(2000, int, "source training samples"),
    "synth.n_identities": _Key(100, int, "target identities"),
    "synth.samples_per_identity": _Key(6, int, "target samples per identity"),
    "synth.n_cameras": _Key(3, int, "target cameras (>= 2)"),
    # model scale
    "model.feature_dim": _Key(32, int, "encoder output width"),
    # source pretraining
    "pretrain.epochs": _Key(50, int, "pretraining epochs"),
    "pretrain.batch_size": _Key(64, int, "pretraining batch size"),
    "pretrain.learning_rate": _Key(1e-4, float, "pretraining Adam learning rate"),
    # adversarial adaptation
    "adapt.epochs": _Key(200, int, "adaptation epochs"),
    "adapt.batch_size": _Key(64, int, "adaptation batch size"),
    "adapt.learning_rate": _Key(1e-4, float, "adaptation Adam learning rate"),
    "adapt.alpha": _Key(0.1, float, "weight of the source attribute term"),
    "adapt.variant": _Key("lsgan_both", _parse_choice("lsgan_both", "adda_log"),
                          "adversarial objective"),
    "adapt.with_classifier": _Key(True, _parse_bool, "keep the auxiliary attribute classifier"),
    "adapt.d_steps_per_m_step": _Key(1, int, "discriminator updates per mapping update"),
    "adapt.source_fraction": _Key(0.5, float, "source share of each union batch"),
    "adapt.eval_every_n_epochs": _Key(1, int, "per-epoch retrieval eval cadence (0 = final only)"),
    # retrieval evaluation
    "eval.max_rank": _Key(10, int, "CMC curve length"),
    "eval.exclude_same_camera_same_id": _Key(True, _parse_bool,
                                             "drop same-person same-camera gallery items"),
    "eval.attr_threshold": _Key(0.5, float, "attribute prediction threshold"),
    "eval.encoder_role": _Key("auto", _parse_choice("auto", "source_encoder", "target_encoder"),
                              "which checkpoint encoder to evaluate"),
    # file locations (relative values resolve inside --out)
    "paths.source_train": _Key("source_train.samples.csv", str, "labeled source training set"),
    "paths.source_eval": _Key("source_eval.samples.csv", str, "held-out source set"),
    "paths.target_train": _Key("target_train.samples.csv", str, "unlabeled target training set"),
    "paths.target_eval": _Key("target_eval.samples.csv", str, "target query+gallery set"),
    "paths.pretrain_checkpoint": _Key("pretrain.adpt", str, "source model checkpoint"),
    "paths.pretrain_history": _Key("pretrain_history.csv", str, "pretraining loss history"),
    "paths.adapt_checkpoint": _Key("adapt.adpt", str, "adapted model checkpoint"),
    "paths.adapt_trace": _Key("adapt_trace.csv", str, "per-epoch adaptation trace"),
    "paths.eval_report": _Key("eval_report.csv", str, "retrieval evaluation report"),
    "paths.experiment": _Key("", str, "experiment output csv ('' = named after the preset)"),
}


class RunConfig:
    """Resolved flat configuration with typed access and path resolution."""

    def __init__(self, values: dict, seed: int, out_dir: str):
        self.values = values
        self.seed = seed
        self.out_dir = out_dir

    def __getitem__(self, key):
        return self.values[key]

    def path(self, key) -> str:
        value = self.values[key]
        if os.path.isabs(value):
            return value
        return os.path.join(self.out_dir, value)

    def shift_spec(self, seed=None) -> DomainShiftSpec:
        v = self.values
        return DomainShiftSpec(
            m=v["synth.m"], d_in=v["synth.d_in"],
            shift_rotation_angle=v["synth.shift_rotation_angle"],
            shift_translation_scale=v["synth.shift_translation_scale"],
            noise_sigma=v["synth.noise_sigma"], n_source=v["synth.n_source"],
            n_identities=v["synth.n_identities"],
            samples_per_identity=v["synth.samples_per_identity"],
            n_cameras=v["synth.n_cameras"],
            seed=self.seed if seed is None else seed,
        )

    def pretrain_config(self, seed=None) -> PretrainConfig:
        v = self.values
        return PretrainConfig(
            epochs=v["pretrain.epochs"], batch_size=v["pretrain.batch_size"],
            learning_rate=v["pretrain.learning_rate"],
            seed=self.seed if seed is None else seed,
        )

    def adapt_config(self, seed=None, **overrides) -> AdaptConfig:
        v = self.values
        kwargs = dict(
            epochs=v["adapt.epochs"], batch_size=v["adapt.batch_size"],
            learning_rate=v["adapt.learning_rate"], alpha=v["adapt.alpha"],
            variant=LossVariant(v["adapt.variant"]),
            with_classifier=v["adapt.with_classifier"],
            d_steps_per_m_step=v["adapt.d_steps_per_m_step"],
            source_fraction_in_union_batch=v["adapt.source_fraction"],
            eval_every_n_epochs=v["adapt.eval_every_n_epochs"],
            seed=self.seed if seed is None else seed,
        )
        kwargs.update(overrides)
        return AdaptConfig(**kwargs)

    def protocol(self) -> RankingProtocol:
        return RankingProtocol(
            exclude_same_camera_same_id=self.values["eval.exclude_same_camera_same_id"],
            max_rank=self.values["eval.max_rank"],
        )


def _parse_kv(line: str, where: str):
    if "=" not in line:
        raise ConfigError(f"{where}: expected key=value, got {line!r}")
    key, _, value = line.partition("=")
    return key.strip(), value.strip()


def load_config(config_path: Optional[str], sets, seed: int, out_dir: str) -> RunConfig:
    values = {k: spec.default for k, spec in KEYS.items()}

    def apply(key, raw, where):
        if key not in KEYS:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        try:
            values[key] = KEYS[key].parse(raw)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key}: {exc}") from None

    if config_path:
        try:
            with open(config_path, encoding="utf-8") as fh:
                lines = fh.read().splitlines()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}") from None
        for i, line in enumerate(lines, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            key, raw = _parse_kv(stripped, f"{config_path}:{i}")
            apply(key, raw, f"{config_path}:{i}")
    for item in sets or ():
        key, raw = _parse_kv(item, "--set")
        apply(key, raw, "--set")
    return RunConfig(values, seed=seed, out_dir=out_dir)


def _derived_seeds(seed: int):
    """Stable sub-seeds for multi-stage experiment presets."""
    state = np.random.SeedSequence(seed).generate_state(4)
    return {"synth": int(state[0]), "pretrain": int(state[1]), "adapt": int(state[2])}


def _load_dataset(path) -> Dataset:
    try:
        return read_csv(path)
    except FileNotFoundError:
        raise DataFormatError(f"dataset file not found: {path}") from None


def _pick_roles(paramsets: dict):
    encoder = paramsets.get("target_encoder") or paramsets.get("source_encoder")
    classifier = paramsets.get("adapt_classifier") or paramsets.get("source_classifier")
    if encoder is None:
        raise DataFormatError("checkpoint contains no encoder")
    return encoder, classifier


def _write_lines(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    pair = generate_pair(cfg.shift_spec())
    writes = [
        (cfg.path("paths.source_train"), pair.source.filter_split("train")),
        (cfg.path("paths.source_eval"), pair.source.filter_split("query")),
        (cfg.path("paths.target_train"), pair.target.filter_split("train")),
        (cfg.path("paths.target_eval"),
         pair.target.subset(pair.target.splits != "train")),
    ]
    for path, ds in writes:
        write_csv(ds, path)
        print(f"wrote {len(ds):5d} samples -> {path}")
    return 0


def cmd_pretrain(cfg: RunConfig) -> int:
    source = _load_dataset(cfg.path("paths.source_train"))
    specs = default_specs(source.feature_dim, source.n_attributes,
                          feature_dim=cfg["model.feature_dim"])
    result = pretrain_source(source, cfg.pretrain_config(), specs=specs)
    save_checkpoint([result.encoder, result.classifier],
                    cfg.path("paths.pretrain_checkpoint"))
    _write_lines(cfg.path("paths.pretrain_history"),
                 ["epoch,attr_loss"] + [f"{i},{v!r}" for i, v in enumerate(result.history)])
    print(f"pretrained {cfg['pretrain.epochs']} epochs: "
          f"loss {result.history[0]:.4f} -> {result.history[-1]:.4f}")
    print(f"wrote {cfg.path('paths.pretrain_checkpoint')}")
    return 0


def _make_eval_hook(cfg: RunConfig):
    """Per-epoch retrieval eval on the target query/gallery file, if present."""
    path = cfg.path("paths.target_eval")
    if not os.path.exists(path):
        return None
    target_eval = _load_dataset(path)
    query = target_eval.filter_split("query")
    gallery = target_eval.filter_split("gallery")
    protocol = cfg.protocol()

    def hook(encoder, classifier, epoch):
        report = evaluate_retrieval(encoder, query, gallery, protocol)
        return {"rank1": report.rank1, "map": report.map}

    return hook


def cmd_adapt(cfg: RunConfig) -> int:
    paramsets = load_checkpoint(cfg.path("paths.pretrain_checkpoint"))
    if "source_encoder" not in paramsets or "source_classifier" not in paramsets:
        raise DataFormatError("pretrain checkpoint must hold source_encoder and source_classifier")
    source = _load_dataset(cfg.path("paths.source_train"))
    target_train = _load_dataset(cfg.path("paths.target_train"))
    result = adapt(paramsets["source_encoder"], paramsets["source_classifier"],
                   source, target_train, cfg.adapt_config(),
                   eval_hook=_make_eval_hook(cfg))
    save_checkpoint([result.encoder, result.classifier, result.discriminator],
                    cfg.path("paths.adapt_checkpoint"))
    trace_to_csv(result.trace, cfg.path("paths.adapt_trace"))
    last = result.trace[-1]
    print(f"adapted {cfg['adapt.epochs']} epochs: d_loss {last.d_loss:.4f}, "
          f"m_loss {last.m_loss:.4f}")
    if last.rank1 is not None:
        print(f"final rank1 {last.rank1:.4f}, map {last.map:.4f}")
    print(f"wrote {cfg.path('paths.adapt_checkpoint')}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    checkpoint_path = cfg.path("paths.adapt_checkpoint")
    if not os.path.exists(checkpoint_path):
        checkpoint_path = cfg.path("paths.pretrain_checkpoint")
    paramsets = load_checkpoint(checkpoint_path)
    role = cfg["eval.encoder_role"]
    if role == "auto":
        encoder, classifier = _pick_roles(paramsets)
    else:
        if role not in paramsets:
            raise ConfigError(f"checkpoint has no {role} (roles: {sorted(paramsets)})")
        encoder = paramsets[role]
        classifier = paramsets.get(
            "adapt_classifier" if role == "target_encoder" else "source_classifier")

    target_eval = _load_dataset(cfg.path("paths.target_eval"))
    protocol = cfg.protocol()
    report = evaluate_retrieval(
        encoder, target_eval.filter_split("query"), target_eval.filter_split("gallery"),
        protocol, fingerprint=protocol_fingerprint(protocol, extra=encoder.role),
    )
    source_eval_path = cfg.path("paths.source_eval")
    if classifier is not None and os.path.exists(source_eval_path):
        source_eval = _load_dataset(source_eval_path)
        per_attr, mean_acc = attr_accuracy(classifier, encoder, source_eval,
                                           threshold=cfg["eval.attr_threshold"])
        report.attr_accuracy = per_attr
        report.attr_mean_accuracy = mean_acc
    report.to_csv(cfg.path("paths.eval_report"))
    print(f"evaluated {encoder.role} from {checkpoint_path}")
    print(report.summary())
    return 0


# ---------------------------------------------------------------------------
# experiment presets
# ---------------------------------------------------------------------------

def _experiment_table1(cfg: RunConfig) -> int:
    """Retrieval quality before and after adaptation, one row each."""
    seeds = _derived_seeds(cfg.seed)
    pair = generate_pair(cfg.shift_spec(seed=seeds["synth"]))
    query = pair.target.filter_split("query")
    gallery = pair.target.filter_split("gallery")
    protocol = cfg.protocol()

    specs = default_specs(pair.source.feature_dim, pair.source.n_attributes,
                          feature_dim=cfg["model.feature_dim"])
    pre = pretrain_source(pair.source.filter_split("train"),
                          cfg.pretrain_config(seed=seeds["pretrain"]), specs=specs)
    before = evaluate_retrieval(pre.encoder, query, gallery, protocol)

    res = adapt(pre.encoder, pre.classifier, pair.source.filter_split("train"),
                pair.target.filter_split("train"),
                cfg.adapt_config(seed=seeds["adapt"], eval_every_n_epochs=0))
    after = evaluate_retrieval(res.encoder, query, gallery, protocol)

    out = cfg.path("paths.experiment") if cfg["paths.experiment"] \
        else os.path.join(cfg.out_dir, "table1.csv")
    _write_lines(out, [
        "condition,rank1,map",
        f"no_adaptation,{before.rank1!r},{before.map!r}",
        f"adaptation,{after.rank1!r},{after.map!r}",
    ])
    print(f"no adaptation: rank1 {before.rank1:.4f}, map {before.map:.4f}")
    print(f"adaptation:    rank1 {after.rank1:.4f}, map {after.map:.4f}")
    print(f"wrote {out}")
    return 0


def _experiment_fig4(cfg: RunConfig) -> int:
    """Per-epoch rank1 of adaptation with and without the auxiliary classifier."""
    seeds = _derived_seeds(cfg.seed)
    pair = generate_pair(cfg.shift_spec(seed=seeds["synth"]))
    query = pair.target.filter_split("query")
    gallery = pair.target.filter_split("gallery")
    protocol = cfg.protocol()

    specs = default_specs(pair.source.feature_dim, pair.source.n_attributes,
                          feature_dim=cfg["model.feature_dim"])
    pre = pretrain_source(pair.source.filter_split("train"),
                          cfg.pretrain_config(seed=seeds["pretrain"]), specs=specs)

    def hook(encoder, classifier, epoch):
        report = evaluate_retrieval(encoder, query, gallery, protocol)
        return {"rank1": report.rank1, "map": report.map}

    curves = {}
    for label, flag in (("with", True), ("without", False)):
        res = adapt(pre.encoder, pre.classifier, pair.source.filter_split("train"),
                    pair.target.filter_split("train"),
                    cfg.adapt_config(seed=seeds["adapt"], with_classifier=flag,
                                     eval_every_n_epochs=1),
                    eval_hook=hook)
        curves[label] = [rec.rank1 for rec in res.trace]
        trace_to_csv(res.trace, os.path.join(cfg.out_dir, f"adapt_trace_{label}_classifier.csv"))

    out = cfg.path("paths.experiment") if cfg["paths.experiment"] \
        else os.path.join(cfg.out_dir, "fig4.csv")
    lines = ["epoch,rank1_with_classifier,rank1_without_classifier"]
    for epoch, (w, wo) in enumerate(zip(curves["with"], curves["without"])):
        lines.append(f"{epoch},{w!r},{wo!r}")
    _write_lines(out, lines)
    print(f"epoch 0 rank1: {curves['with'][0]:.4f}")
    print(f"final rank1 with classifier:    {curves['with'][-1]:.4f}")
    print(f"final rank1 without classifier: {curves['without'][-1]:.4f}")
    print(f"wrote {out}")
    return 0


_PRESETS = {"table1": _experiment_table1, "fig4": _experiment_fig4}


def cmd_experiment(cfg: RunConfig, preset: str) -> int:
    if preset not in _PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; available: {', '.join(sorted(_PRESETS))}")
    return _PRESETS[preset](cfg)


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _keys_epilog(prefixes):
    lines = ["configuration keys (defaults in parentheses):"]
    for key, spec in KEYS.items():
        if any(key.startswith(p) for p in prefixes):
            lines.append(f"  {key} ({spec.default!r}): {spec.help}")
    return "\n".join(lines)


_COMMANDS = {
    "synth": ("generate a synthetic source/target dataset pair",
              ("synth.", "paths.")),
    "pretrain": ("train the source attribute model",
                 ("pretrain.", "model.", "paths.")),
    "adapt": ("adversarially adapt the source model to the target domain",
              ("adapt.", "model.", "eval.", "paths.")),
    "eval": ("evaluate retrieval (and attribute accuracy) of a checkpoint",
             ("eval.", "paths.")),
    "experiment": ("run a preset experiment (table1 | fig4)",
                   ("synth.", "model.", "pretrain.", "adapt.", "eval.", "paths.")),
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attradapt",
        description="Attribute-based ReID with unsupervised adversarial domain adaptation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (help_text, prefixes) in _COMMANDS.items():
        p = sub.add_parser(
            name, help=help_text, description=help_text,
            epilog=_keys_epilog(prefixes),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        if name == "experiment":
            p.add_argument("preset", choices=sorted(_PRESETS), help="experiment preset")
        p.add_argument("--config", metavar="PATH", help="key=value config file")
        p.add_argument("--seed", type=int, default=0, help="master random seed (default 0)")
        p.add_argument("--out", metavar="DIR", default="runs",
                       help="output directory (default: runs)")
        p.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                       help="override one config key (repeatable)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        os.makedirs(args.out, exist_ok=True)
        cfg = load_config(args.config, args.set, seed=args.seed, out_dir=args.out)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "adapt":
            return cmd_adapt(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        return cmd_experiment(cfg, args.preset)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
