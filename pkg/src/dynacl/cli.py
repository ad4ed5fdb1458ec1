"""Command-line entry point: ``dynacl <command> [options]``.

Every command writes into its output directory:

    config.resolved.yaml   the fully defaulted configuration that ran
    metrics.jsonl          one JSON record per epoch / evaluation
    artifacts.json         files produced, dataset manifests, wall time

Exit codes: 0 ok, 2 bad configuration or arguments, 3 data or checkpoint
problems, 4 numerical failure. Failures print a one-line message and a JSON
error record on stderr, and the record is also written to ``error.json``.
"""
import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import config as cfgmod
from .data import content_hash
from .diagnostics import sweep, write_sweep_csv
from .encoder import encoder_from_checkpoint, load_checkpoint
from .errors import ConfigError, DataError, DynaclError
from .evaluate import EvalProtocolConfig, append_jsonl, finetune, report
from .plotting import plot_run
from .postprocess import extract_features, kmeans, load_classifier, lp_aft, save_classifier
from .pretrain import pretrain, resume

log = logging.getLogger("dynacl")


class _Run:
    """Output directory bookkeeping shared by all commands."""

    def __init__(self, out_dir, cfg, command):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.start = time.perf_counter()
        self.files = []
        self.manifests = []
        self.metrics = self.dir / "metrics.jsonl"
        if cfg is not None:
            self.add(cfgmod.dump_config(cfg, self.dir / "config.resolved.yaml"))

    def add(self, path):
        self.files.append(str(Path(path).name))
        return path

    def record(self, rec):
        append_jsonl(self.metrics, rec)
        if self.metrics.name not in self.files:
            self.files.append(self.metrics.name)

    def finish(self, **extra):
        info = {"command": self.command, "files": sorted(set(self.files)),
                "datasets": [json.loads(m.to_json()) for m in self.manifests],
                "wall_time": time.perf_counter() - self.start, **extra}
        (self.dir / "artifacts.json").write_text(json.dumps(info, indent=2, sort_keys=True))


def _apply_overrides(raw: dict, pairs) -> dict:
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key.path=value, got {pair!r}")
        key, value = pair.split("=", 1)
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a section")
        node[parts[-1]] = yaml.safe_load(value)
    return raw


def _load_cfg(args) -> cfgmod.RunConfig:
    raw = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    raw = _apply_overrides(raw, getattr(args, "set", None))
    return cfgmod.from_dict(raw)


def _out_dir(args, cfg, command):
    return Path(args.out) if getattr(args, "out", None) else Path(cfg.output_dir) / command


def _split(run, cfg, split):
    batch, manifest = cfgmod.load_split(cfg.data, split)
    run.manifests.append(manifest)
    return batch


def _encoder(args):
    blob = load_checkpoint(args.ckpt)
    if blob.get("kind") != "pretrain":
        raise DataError(f"{args.ckpt} is not a pretraining checkpoint (kind={blob.get('kind')!r})")
    return blob, encoder_from_checkpoint(blob, getattr(args, "which", "momentum"))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_pretrain(args):
    cfg = _load_cfg(args)
    run = _Run(_out_dir(args, cfg, "pretrain"), cfg, "pretrain")
    train = _split(run, cfg, "train")
    ckpt_dir = run.dir / "checkpoints"
    if args.resume:
        tr = resume(args.resume, train, out_dir=ckpt_dir, until=args.until, on_record=run.record)
    else:
        tr = pretrain(cfg.pretrain, train, out_dir=ckpt_dir, until=args.until, on_record=run.record)
    if not (ckpt_dir / "last.pt").is_file():
        tr.save(ckpt_dir / "last.pt")
    run.files += [str(p.relative_to(run.dir)) for p in sorted(ckpt_dir.glob("*.pt"))]
    run.finish(epochs_completed=tr.epoch, checkpoint=str(ckpt_dir / "last.pt"))
    print(f"pretraining finished at epoch {tr.epoch}; checkpoint {ckpt_dir / 'last.pt'}")


def cmd_postprocess(args):
    cfg = _load_cfg(args)
    pp = cfg.postprocess
    run = _Run(_out_dir(args, cfg, "postprocess"), cfg, "postprocess")
    blob, enc = _encoder(args)
    train = _split(run, cfg, "train")
    h = content_hash(train)
    if blob.get("dataset_hash") and blob["dataset_hash"] != h:
        log.warning("post-processing data differs from the pretraining data")
    k = pp.k or int(train.num_classes or 0)
    if k < 1:
        raise ConfigError("postprocess.k must be set for unlabelled data")
    feats = extract_features(enc, train.data, branch="clean", projection=pp.use_projection)
    pl = kmeans(feats, k, pp.max_iters, seed=cfg.seed, normalize=pp.normalize, n_init=pp.n_init)
    run.add(pl.save(run.dir / "pseudo_labels.npy", h))
    run.add(run.dir / "pseudo_labels.json")
    run.record({"stage": "kmeans", "k": k, "inertia": pl.inertia, "iterations": pl.iterations,
                "empty_reseeds": pl.empty_reseeds})
    clf = lp_aft(enc, train, pl, pp.attack, pp.lp_epochs, pp.aft_epochs, pp.lp_lr, pp.aft_lr,
                 pp.batch_size, pp.beta, seed=cfg.seed)
    run.record({"stage": "lp_aft", **clf.history})
    run.add(save_classifier(clf, run.dir / "encoder_lpaft.pt", source=str(args.ckpt)))
    run.finish()
    print(f"k-means inertia {pl.inertia:.4f} after {pl.iterations} iterations; "
          f"classifier {run.dir / 'encoder_lpaft.pt'}")


def cmd_eval(args):
    cfg = _load_cfg(args)
    kw = {}
    if args.label_fraction is not None:
        kw["label_fraction"] = args.label_fraction
    if args.epochs is not None:
        kw["epochs"] = args.epochs
    base = dataclasses.replace(cfg.eval, protocol=args.protocol)
    if args.recipe:
        base = EvalProtocolConfig.defaults(args.protocol, args.recipe, train_attack=base.train_attack,
                                           attack=base.attack, trades_beta=base.trades_beta)
    ecfg = dataclasses.replace(base, **kw)
    cfg = dataclasses.replace(cfg, eval=ecfg)
    run = _Run(_out_dir(args, cfg, f"eval_{args.protocol}"), cfg, "eval")
    _, enc = _encoder(args)
    train, test = _split(run, cfg, "train"), _split(run, cfg, "test")
    clf = finetune(enc, train, ecfg, seed=cfg.seed)
    run.record({"stage": "finetune", "protocol": ecfg.protocol, "loss": clf.history})
    rec = report(clf, test, ecfg.attack, ecfg.protocol, cfg.seed, label=args.label or "")
    rec.extra["label_fraction"] = ecfg.label_fraction
    run.record(rec)
    run.add(save_classifier(clf, run.dir / "classifier.pt", protocol=ecfg.protocol))
    run.finish()
    print(f"{ecfg.protocol.upper()}: SA {100 * rec.standard_accuracy:.2f}%  RA {100 * rec.robust_accuracy:.2f}%")


def cmd_attack(args):
    cfg = _load_cfg(args)
    run = _Run(_out_dir(args, cfg, "attack"), cfg, "attack")
    clf = load_classifier(args.ckpt)
    test = _split(run, cfg, "test")
    spec = cfg.eval.attack.with_(epsilon=args.eps, iterations=args.steps,
                                 step_size=args.step_size if args.step_size is not None else cfg.eval.attack.step_size,
                                 loss=args.loss)
    rec = report(clf, test, spec, "attack", cfg.seed, label=args.label or "")
    run.record(rec)
    run.finish()
    print(f"{spec.describe()}: SA {100 * rec.standard_accuracy:.2f}%  RA {100 * rec.robust_accuracy:.2f}%")


def _limit(batch, n, seed):
    if n is None or n >= len(batch):
        return batch
    idx = np.sort(np.random.default_rng(seed).permutation(len(batch))[:n])
    return batch.subset(idx)


def _strengths(values):
    out = []
    for v in values or []:
        for part in str(v).split(","):
            if part.strip():
                try:
                    out.append(float(part))
                except ValueError as exc:
                    raise ConfigError(f"bad strength {part!r}") from exc
    return out


def cmd_diagnose(args):
    cfg = _load_cfg(args)
    d = cfg.diagnose
    if args.strengths:
        d = dataclasses.replace(d, strengths=tuple(_strengths(args.strengths)))
        cfg = dataclasses.replace(cfg, diagnose=d)
    run = _Run(_out_dir(args, cfg, f"diagnose_{args.metric}"), cfg, "diagnose")
    train = _limit(_split(run, cfg, "train"), d.train_limit, cfg.seed)
    which = "both" if args.metric == "sweep" else args.metric
    test = None
    if which != "classwise":
        test = _limit(_split(run, cfg, "test"), d.test_limit, cfg.seed + 1)
    rows = sweep(train, d.strengths, which, test, d.mmd, d.augs_per_sample, d.sample_cap, cfg.seed)
    run.add(write_sweep_csv(rows, run.dir / "sweep.csv", d.mmd.bandwidths))
    for r in rows:
        rec = dataclasses.asdict(r)
        rec["mmd_per_bandwidth"] = {f"{k:g}": v for k, v in r.mmd_per_bandwidth.items()}
        run.record(rec)
        parts = [f"s={r.strength:.3f}"]
        if r.mmd_mean is not None:
            parts.append(f"mmd={r.mmd_mean:.5f}")
        if r.classwise_min is not None:
            parts.append(f"min_linf={r.classwise_min:.4f} separable={r.separable_at_2eps}")
        print("  ".join(parts))
    run.finish()


def cmd_plot(args):
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise DataError(f"run directory not found: {run_dir}")
    made = plot_run(run_dir)
    if not made:
        raise DataError(f"nothing to plot in {run_dir} (no metrics.jsonl with epochs, no sweep.csv)")
    for p in made:
        print(p)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynacl", description="Dynamic adversarial contrastive pretraining toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, ckpt=False):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--out", help="output directory (default: <output_dir>/<command>)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. pretrain.plan.total_epochs=10")
        if ckpt:
            sp.add_argument("--ckpt", required=True)

    sp = sub.add_parser("pretrain", help="robust contrastive pretraining")
    common(sp)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--until", type=int, help="stop after this many epochs in total")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("postprocess", help="k-means pseudo labels + LP-AFT")
    common(sp, ckpt=True)
    sp.set_defaults(fn=cmd_postprocess)

    sp = sub.add_parser("eval", help="finetune and report SA / RA")
    common(sp, ckpt=True)
    sp.add_argument("--protocol", choices=("slf", "alf", "aff"), required=True)
    sp.add_argument("--label-fraction", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--recipe", choices=("cifar10", "cifar100", "stl10"),
                    help="use the standard optimiser recipe for this dataset")
    sp.add_argument("--which", choices=("momentum", "online"), default="momentum")
    sp.add_argument("--label")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("attack", help="PGD robust accuracy of a classifier checkpoint")
    common(sp, ckpt=True)
    sp.add_argument("--eps", type=float, default=8 / 255)
    sp.add_argument("--steps", type=int, default=20)
    sp.add_argument("--step-size", type=float)
    sp.add_argument("--loss", choices=("ce", "margin"), default="ce")
    sp.add_argument("--label")
    sp.set_defaults(fn=cmd_attack)

    sp = sub.add_parser("diagnose", help="MMD / classwise-distance diagnostics")
    common(sp)
    sp.add_argument("--metric", choices=("mmd", "classwise", "sweep"), required=True)
    sp.add_argument("--strengths", nargs="+", help="e.g. 0,0.5,1 or 0 0.5 1")
    sp.set_defaults(fn=cmd_diagnose)

    sp = sub.add_parser("plot", help="render figures for a run directory")
    sp.add_argument("--run", required=True)
    sp.set_defaults(fn=cmd_plot)
    return p


def _fail(exc, code, args):
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code,
              "command": getattr(args, "command", None)}
    print(f"dynacl: error: {exc}", file=sys.stderr)
    print(json.dumps(record, sort_keys=True), file=sys.stderr)
    out = getattr(args, "out", None)
    if out:
        try:
            Path(out).mkdir(parents=True, exist_ok=True)
            (Path(out) / "error.json").write_text(json.dumps(record, indent=2, sort_keys=True))
        except OSError:
            pass
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except DynaclError as exc:
        return _fail(exc, exc.exit_code, args)
    except FloatingPointError as exc:
        return _fail(exc, 4, args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
