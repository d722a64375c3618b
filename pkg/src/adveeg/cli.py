"""Command-line driver: ``synth``, ``train``, ``sweep`` and ``eval``.

Every command reads an optional JSON config (``--config``), applies flag
overrides, validates the result and writes under ``<out>/<run-id>/`` together
with ``config.resolved.json``. Run IDs are derived from the resolved config, so
an identical invocation rewrites identical files (only timing fields differ).

Exit codes: 0 success, 1 unreadable input files, 2 invalid config or usage,
3 numeric abort during training.
"""

from __future__ import annotations

import argparse
import dataclasses
import functools
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import dataset, synth
from .errors import ConfigError, FormatError, NumericError
from .evaluation import EvalReport, RunResult, evaluate_run
from .model import ModelSpec, build, load_model, save_model
from .train import TrainConfig, leakage, train

log = logging.getLogger("adveeg")

DEFAULT_LAMBDAS = (0.0, 0.01, 0.05, 0.1)
DEFAULT_SEEDS = tuple(range(1, 13))
DEFAULT_NUISANCE = 0.8


# ------------------------------------------------------------------------- config


def _known(cls, section, values):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"{section}: unknown field(s) {', '.join(unknown)}")
    return values


@dataclasses.dataclass
class ExperimentConfig:
    """Everything one invocation needs; ``data`` holds either ``bundle`` or ``synth``."""

    data: dict = dataclasses.field(default_factory=lambda: {"synth": {"nuisance_strength": DEFAULT_NUISANCE}})
    split: dict = dataclasses.field(default_factory=dict)
    model: dict = dataclasses.field(default_factory=dict)
    train: dict = dataclasses.field(default_factory=dict)
    lambdas: list = dataclasses.field(default_factory=lambda: list(DEFAULT_LAMBDAS))
    seeds: list = dataclasses.field(default_factory=lambda: list(DEFAULT_SEEDS))
    out: str = "runs"

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        _known(cls, "config", d)
        cfg = cls(**{k: v for k, v in d.items()})
        cfg.data = dict(cfg.data)
        return cfg

    def to_dict(self):
        return dataclasses.asdict(self)

    # typed views; each raises ConfigError naming the offending field
    def synth_config(self):
        if "synth" not in self.data:
            return None
        try:
            return synth.SynthConfig.from_dict(_known(synth.SynthConfig, "data.synth", self.data["synth"])).validate()
        except TypeError as exc:
            raise ConfigError(f"data.synth: {exc}") from exc

    def split_spec(self):
        d = _known(dataset.SplitSpec, "split", self.split)
        if "test_blocks" in d:
            d = dict(d, test_blocks=tuple(int(b) for b in d["test_blocks"]))
        return dataset.SplitSpec(**d).validate()

    def train_config(self, lam=None, seed=None):
        d = dict(_known(TrainConfig, "train", self.train))
        if lam is not None:
            d["lam"] = float(lam)
        if seed is not None:
            d["seed"] = int(seed)
        return TrainConfig(**d).validate()

    def model_spec(self, channels, samples, n_blocks):
        """Model spec with data-derived fields filled in; explicit overrides must agree."""
        d = dict(_known(ModelSpec, "model", self.model))
        derived = dict(channels=channels, samples=samples, n_blocks=n_blocks)
        for key, value in derived.items():
            if key in d and d[key] != value:
                raise ConfigError(f"model.{key} = {d[key]} but the data/split imply {value}")
            d[key] = value
        return ModelSpec(**d).validate()

    def validate(self):
        try:
            return self._validate()
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def _validate(self):
        keys = set(self.data)
        if keys not in ({"synth"}, {"bundle"}):
            raise ConfigError("data: give exactly one of 'synth' (generator settings) or 'bundle' (path)")
        scfg = self.synth_config()
        split_spec = self.split_spec()
        self.train_config()
        for lam in self.lambdas:
            if not isinstance(lam, (int, float)) or lam < 0:
                raise ConfigError(f"lambdas: {lam!r} is not a non-negative number")
        if not self.lambdas:
            raise ConfigError("lambdas: empty list")
        if not self.seeds or any(not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("seeds: need a non-empty list of non-negative integers")
        if scfg is not None:
            missing = sorted(set(split_spec.test_blocks) - set(range(1, scfg.n_blocks + 1)))
            if missing:
                raise ConfigError(f"split.test_blocks: {missing} not among the {scfg.n_blocks} generated blocks")
            n_train_blocks = scfg.n_blocks - len(set(split_spec.test_blocks))
            if n_train_blocks < 1:
                raise ConfigError("split.test_blocks: no blocks left for training")
            self.model_spec(scfg.channels, scfg.samples, n_train_blocks)
        return self

    def digest(self, *extra):
        """Short hash of everything that affects results (the output root does not)."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps([d, *extra], sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:10]


def load_config(path=None, overrides=None) -> ExperimentConfig:
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    cfg = ExperimentConfig.from_dict(d)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "nuisance_strength":
            if "synth" not in cfg.data:
                raise ConfigError("--nuisance-strength only applies to synthetic data")
            cfg.data["synth"] = dict(cfg.data["synth"], nuisance_strength=value)
        elif key == "lam":
            cfg.lambdas = [value]
        elif key == "seed":
            cfg.seeds = [value]
        elif key == "out":
            cfg.out = value
        else:
            raise KeyError(key)
    return cfg


# ----------------------------------------------------------------------------- data


@functools.lru_cache(maxsize=2)
def _load_data(data_json):
    data = json.loads(data_json)
    if "synth" in data:
        epochs = synth.generate(synth.SynthConfig.from_dict(data["synth"]))
    else:
        epochs = dataset.load_bundle(data["bundle"])
    return epochs if epochs.normalized else dataset.normalize(epochs)


def prepare_data(cfg: ExperimentConfig):
    """Normalized ``(train, validation, test)`` for the configured data source."""
    epochs = _load_data(json.dumps(cfg.data, sort_keys=True))
    return dataset.split(epochs, cfg.split_spec())


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ------------------------------------------------------------------------- commands


def cmd_synth(cfg: ExperimentConfig):
    scfg = cfg.synth_config()
    if scfg is None:
        raise ConfigError("synth: config data source must be 'synth'")
    out = Path(cfg.out) / f"synth-{cfg.digest('synth')}"
    epochs = synth.generate(scfg)
    dataset.save_bundle(epochs, out)
    _write_json(out / "config.resolved.json", cfg.to_dict())
    log.info("wrote %d epochs (%d blocks) to %s", len(epochs), scfg.n_blocks, out)
    return out


def run_one(cfg: ExperimentConfig, lam, seed, quiet=True):
    """One (lambda, seed) training run; writes the full run directory and returns its RunResult."""
    run_id = f"train-lam{lam:g}-seed{seed}-{cfg.digest('train', lam, seed)}"
    out = Path(cfg.out) / run_id
    out.mkdir(parents=True, exist_ok=True)
    tr, va, te = prepare_data(cfg)
    spec = cfg.model_spec(tr.channels, tr.samples, len(set(tr.block_ids()) | set(va.block_ids())))
    tcfg = cfg.train_config(lam, seed)
    t0 = time.perf_counter()
    progress = None if quiet else (lambda r: log.info("  [lam=%g seed=%d] epoch %d val loss %.4f adv acc %.3f",
                                                      lam, seed, r.epoch, r.val_classifier_loss,
                                                      r.val_adversary_acc))
    model, tlog = train(build(spec, seed), tr, va, tcfg, log_fn=progress)
    runtime = time.perf_counter() - t0
    ev = evaluate_run(model, te, leakage_set=va)
    result = RunResult(lam=float(lam), seed=int(seed), test_auc=ev["auc"], val_adversary_acc=leakage(model, va),
                       val_classifier_acc=tlog.best().val_classifier_acc, best_epoch=tlog.best_epoch,
                       epochs_run=len(tlog.records), runtime_s=runtime, run_id=run_id)
    save_model(model, out)
    tlog.save(out / "trainlog.jsonl")
    ev["roc"].to_csv(out / "roc.csv")
    report = EvalReport([result], meta=dict(
        classifier_confusion=ev["classifier_confusion"].tolist(),
        adversary_confusion=ev["adversary_confusion"].tolist(),
        steps=tlog.steps))
    report.save(out / "report.json")
    _write_json(out / "config.resolved.json", dict(cfg.to_dict(), lambdas=[lam], seeds=[seed]))
    return result


def _run_job(args):
    cfg_dict, lam, seed = args
    return run_one(ExperimentConfig.from_dict(cfg_dict), lam, seed)


def cmd_train(cfg: ExperimentConfig, quiet=False):
    lam, seed = cfg.lambdas[0], cfg.seeds[0]
    r = run_one(cfg, lam, seed, quiet=quiet)
    log.info("lam=%g seed=%d: test AUC %.4f, validation leakage %.3f, best epoch %d (%.1fs)",
             r.lam, r.seed, r.test_auc, r.val_adversary_acc, r.best_epoch, r.runtime_s)
    return Path(cfg.out) / r.run_id


def cmd_sweep(cfg: ExperimentConfig, jobs=1):
    grid = [(float(lam), int(seed)) for lam in cfg.lambdas for seed in cfg.seeds]
    out = Path(cfg.out) / f"sweep-{cfg.digest('sweep')}"
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.resolved.json", cfg.to_dict())
    results = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for r in pool.map(_run_job, [(cfg.to_dict(), lam, seed) for lam, seed in grid]):
                log.info("lam=%g seed=%d: AUC %.4f leakage %.3f", r.lam, r.seed, r.test_auc, r.val_adversary_acc)
                results.append(r)
    else:
        for lam, seed in grid:
            r = run_one(cfg, lam, seed)
            log.info("lam=%g seed=%d: AUC %.4f leakage %.3f", r.lam, r.seed, r.test_auc, r.val_adversary_acc)
            results.append(r)
    report = EvalReport(results, meta=dict(lambdas=[float(v) for v in cfg.lambdas], seeds=list(cfg.seeds)))
    report.add_paired_tests(baseline=0.0)
    report.save(out / "report.json")
    for row in report.summary():
        log.info("lam=%-5g n=%2d AUC %.4f +- %.4f  leakage %.3f", row["lam"], row["n"], row["mean_test_auc"],
                 row["std_test_auc"], row["mean_val_adversary_acc"])
    for t in report.paired_tests:
        log.info("wilcoxon lam=%g vs 0: p=%s, mean diff %+.4f", t["lam"], t.get("p_value"), t["mean_difference"])
    return out


def cmd_eval(cfg: ExperimentConfig, model_path, bundle_path=None):
    """Test AUC on the test split and adversary leakage on the validation split of a saved model."""
    if bundle_path is not None:
        cfg.data = {"bundle": str(bundle_path)}
    model = load_model(model_path)
    tr, va, te = prepare_data(cfg)
    if (te.channels, te.samples) != (model.spec.channels, model.spec.samples):
        raise ConfigError(f"data epochs are {te.channels}x{te.samples}, model expects "
                          f"{model.spec.channels}x{model.spec.samples}")
    if len(va.block_ids()) != model.spec.n_blocks:
        raise ConfigError(f"split leaves {len(va.block_ids())} training blocks, adversary has {model.spec.n_blocks}")
    ev = evaluate_run(model, te, leakage_set=va)
    out = Path(cfg.out) / f"eval-{cfg.digest('eval', str(model_path))}"
    out.mkdir(parents=True, exist_ok=True)
    result = dict(model=str(model_path), auc=ev["auc"], leakage=ev["leakage"],
                  classifier_confusion=ev["classifier_confusion"].tolist(),
                  adversary_confusion=ev["adversary_confusion"].tolist(), n_test=len(te), n_validation=len(va))
    _write_json(out / "report.json", result)
    ev["roc"].to_csv(out / "roc.csv")
    _write_json(out / "config.resolved.json", cfg.to_dict())
    log.info("test AUC %.4f, validation leakage %.3f", ev["auc"], ev["leakage"])
    return out


# ---------------------------------------------------------------------------- entry


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--out", help="output root (default: runs)")
    common.add_argument("--nuisance-strength", type=float, help="override data.synth.nuisance_strength")
    common.add_argument("--quiet", action="store_true", help="only print errors")

    parser = argparse.ArgumentParser(prog="adveeg", description="Adversarially censored ERP feature learning")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic epoch bundle")
    p = sub.add_parser("train", parents=[common], help="one training run")
    p.add_argument("--lambda", dest="lam", type=float, help="adversarial weight (default: first of config lambdas)")
    p.add_argument("--seed", type=int, help="model/training seed")
    p = sub.add_parser("sweep", parents=[common], help="train every lambda x seed and compare")
    p.add_argument("--lambda", dest="lam", type=float, help="restrict the sweep to one lambda")
    p.add_argument("--seed", type=int, help="restrict the sweep to one seed")
    p.add_argument("--jobs", type=int, default=1, help="concurrent training processes")
    p = sub.add_parser("eval", parents=[common], help="evaluate a saved model")
    p.add_argument("model", type=Path, help="run directory holding model.json and weights.bin")
    p.add_argument("bundle", type=Path, nargs="?", help="epoch bundle (default: the config's data source)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    try:
        cfg = load_config(args.config, dict(out=args.out, nuisance_strength=args.nuisance_strength,
                                            lam=getattr(args, "lam", None), seed=getattr(args, "seed", None)))
        cfg.validate()
        if args.command == "synth":
            out = cmd_synth(cfg)
        elif args.command == "train":
            out = cmd_train(cfg, quiet=args.quiet)
        elif args.command == "sweep":
            if args.jobs < 1:
                raise ConfigError("--jobs must be at least 1")
            out = cmd_sweep(cfg, jobs=args.jobs)
        else:
            out = cmd_eval(cfg, args.model, args.bundle)
    except ConfigError as exc:
        print(f"adveeg: invalid config: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"adveeg: numeric abort: {exc}", file=sys.stderr)
        return 3
    except FormatError as exc:
        print(f"adveeg: {exc}", file=sys.stderr)
        return 1
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
