"""Batch-experiment command line: ``train``, ``eval``, ``diagnose``, ``verify``.

Exit codes: 0 success, 1 a verification claim failed, 2 config or usage
error, 3 numerical failure, 4 artifact mismatch (checkpoint or data).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import re
import sys
from datetime import datetime, timezone
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import __version__, datagen
from . import theoryverify as tv
from .evalmetrics import MetricError, linear_probe, metrics_report, retrieval
from .model import MaskStrategy, ModelSpec, method_name
from .trainer import (ArraySource, CheckpointError, GradStatsLog, NumericalError, SyntheticSource,
                      TrainConfig, grad_stats, load_checkpoint, representation, save_checkpoint, train,
                      write_metrics_csv)

log = logging.getLogger("bayesncl")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_NUMERIC, EXIT_ARTIFACT = 0, 1, 2, 3, 4

INTERP_HEADER = ("method", "cons", "h_sum", "h_mean", "h_freq", "act")
PROBE_HEADER = ("method", "top1", "top5")
RETRIEVAL_HEADER = ("method", "k", "dims", "precision")


class UsageError(Exception):
    pass


class ArtifactError(Exception):
    pass


# run configuration ------------------------------------------------------------

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class SyntheticData(_Section):
    d: int = Field(64, ge=1)
    m: int = Field(10, ge=2)
    B: int = Field(4, ge=0)
    prevalence: list[float] = Field(default_factory=lambda: [0.9] * 4)
    intensity_range: tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = Field(0.05, ge=0)
    class_prior: Optional[list[float]] = None
    seed: int = Field(0, ge=0)


class DataSection(_Section):
    source: Literal["synthetic", "cifar10"] = "synthetic"
    synthetic: SyntheticData = Field(default_factory=SyntheticData)
    cifar10_dir: Optional[str] = None
    eval_size: int = Field(1000, ge=2)


class StrategySection(_Section):
    kind: Literal["ste", "gumbel_sigmoid", "soft", "topk", "none"] = "ste"
    temperature: float = Field(1.0, gt=0)
    topk_ratio: float = Field(0.8, ge=0, le=1)


class ModelSection(_Section):
    K: int = Field(32, ge=1)
    hidden: list[int] = Field(default_factory=lambda: [64])
    gate_depth: Literal[1, 2, 3] = 2
    strategy: StrategySection = Field(default_factory=StrategySection)
    detach: bool = True
    nonneg: bool = True


class ObjectiveSection(_Section):
    tau: float = Field(0.2, gt=0)
    lambda_: float = Field(3e-5, ge=0, alias="lambda")
    rho: float = Field(0.8, gt=0, lt=1)
    normalize: bool = True
    symmetric_kl: bool = False


class TrainSection(_Section):
    epochs: int = Field(15, ge=0)
    batch_size: int = Field(128, ge=2)
    steps_per_epoch: int = Field(20, ge=1)
    backbone_lr: float = Field(0.1, ge=0)
    gate_lr_scale: float = Field(0.25, ge=0)
    momentum: float = Field(0.9, ge=0)
    weight_decay: float = Field(0.0, ge=0)
    optimizer: Literal["sgd", "lars"] = "sgd"
    trust_coef: float = Field(0.001, ge=0)
    seed: int = Field(0, ge=0)
    stats_every: int = Field(0, ge=0)
    gate_init_prob: float = Field(0.5, gt=0, lt=1)


class ProbeSection(_Section):
    enabled: bool = False
    lr: float = Field(0.5, gt=0)
    epochs: int = Field(300, ge=1)
    n_train: int = Field(2000, ge=2)
    n_test: int = Field(1000, ge=1)


class RetrievalSection(_Section):
    enabled: bool = False
    ks: list[int] = Field(default_factory=lambda: [1, 5])
    dims: Optional[int] = Field(None, ge=1)


class EvalSection(_Section):
    metrics: bool = True
    probe: ProbeSection = Field(default_factory=ProbeSection)
    retrieval: RetrievalSection = Field(default_factory=RetrievalSection)


class OutputSection(_Section):
    dir: str = "runs/default"


class RunConfig(_Section):
    data: DataSection = Field(default_factory=DataSection)
    model: ModelSection = Field(default_factory=ModelSection)
    objective: ObjectiveSection = Field(default_factory=ObjectiveSection)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    output: OutputSection = Field(default_factory=OutputSection)

    def canonical(self) -> dict:
        return self.model_dump(mode="json", by_alias=True)

    def synthetic_spec(self) -> datagen.SyntheticSpec:
        s = self.data.synthetic
        kw = dict(d=s.d, m=s.m, B=s.B, prevalence=tuple(s.prevalence), intensity_range=tuple(s.intensity_range),
                  noise_sigma=s.noise_sigma, seed=s.seed)
        if s.class_prior is not None:
            kw["class_prior"] = tuple(s.class_prior)
        return datagen.SyntheticSpec(**kw)

    def strategy(self) -> MaskStrategy:
        st = self.model.strategy
        return MaskStrategy(st.kind, st.temperature, st.topk_ratio)

    def train_config(self) -> TrainConfig:
        t, o = self.train, self.objective
        return TrainConfig(
            epochs=t.epochs, batch_size=t.batch_size, steps_per_epoch=t.steps_per_epoch,
            backbone_lr=t.backbone_lr, gate_lr_scale=t.gate_lr_scale, momentum=t.momentum,
            weight_decay=t.weight_decay, tau=o.tau, normalize=o.normalize, lam=o.lambda_, rho=o.rho,
            strategy=self.strategy(), optimizer=t.optimizer, trust_coef=t.trust_coef,
            symmetric_kl=o.symmetric_kl, seed=t.seed, stats_every=t.stats_every,
            eval_size=self.data.eval_size, gate_init_prob=t.gate_init_prob,
        )

    def model_spec(self, d: int) -> ModelSpec:
        m = self.model
        return ModelSpec(d=d, K=m.K, hidden=tuple(m.hidden), nonneg=m.nonneg, gate_depth=m.gate_depth,
                         detach=m.detach)


def config_schema() -> dict:
    return RunConfig.model_json_schema(by_alias=True)


def _field_path(loc) -> str:
    return ".".join(str(p) for p in loc) or "<root>"


def parse_config(obj: dict) -> RunConfig:
    """Validate a config document; errors name the offending field path."""
    try:
        cfg = RunConfig.model_validate(obj)
    except ValidationError as e:
        first = e.errors()[0]
        raise UsageError(f"invalid config at {_field_path(first['loc'])}: {first['msg']}") from None
    # invariants owned by the domain types
    for path, build in (("data.synthetic", cfg.synthetic_spec), ("model.strategy", cfg.strategy),
                        ("train", cfg.train_config)):
        try:
            build()
        except (ValueError, TypeError) as e:
            raise UsageError(f"invalid config at {path}: {e}") from None
    if cfg.data.source == "cifar10" and not cfg.data.cifar10_dir:
        raise UsageError("invalid config at data.cifar10_dir: required when data.source is 'cifar10'")
    return cfg


def load_config(path: str) -> tuple[RunConfig, bytes]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    try:
        obj = json.loads(raw.decode("utf-8")) if raw.strip() else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise UsageError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(obj, dict):
        raise UsageError(f"config {path}: top level must be an object")
    return parse_config(obj), raw


# data ------------------------------------------------------------------

def build_source(cfg: RunConfig):
    if cfg.data.source == "synthetic":
        return SyntheticSource(cfg.synthetic_spec(), eval_size=cfg.data.eval_size)
    try:
        tr, te = datagen.load_cifar10(cfg.data.cifar10_dir)
    except (OSError, ValueError) as e:
        raise ArtifactError(str(e)) from None
    return ArraySource(tr, te, eval_size=cfg.data.eval_size)


def _labeled_splits(cfg: RunConfig, data_csv: Optional[str]):
    """(train X, train y, test X, test y, n_classes) for evaluation."""
    if data_csv:
        try:
            X, y = datagen.read_csv(data_csv)
        except (OSError, ValueError) as e:
            raise ArtifactError(f"cannot read dataset {data_csv}: {e}") from None
        cut = max(2, int(0.8 * len(X)))
        n_cls = max(int(y.max()) + 1, 2)
        return X[:cut], y[:cut], X[cut:] if cut < len(X) else X, y[cut:] if cut < len(X) else y, n_cls
    if cfg.data.source == "synthetic":
        spec = cfg.synthetic_spec()
        dic = datagen.build_dictionary(spec)
        p = cfg.eval.probe
        tr, _ = datagen.make_labeled(spec, dic, datagen.rng_stream(spec.seed, 901), max(p.n_train, cfg.data.eval_size))
        te, _ = datagen.make_labeled(spec, dic, datagen.rng_stream(spec.seed, 902), p.n_test)
        return tr.X, tr.y, te.X, te.y, spec.m
    try:
        tr, te = datagen.load_cifar10(cfg.data.cifar10_dir)
    except (OSError, ValueError) as e:
        raise ArtifactError(str(e)) from None
    p = cfg.eval.probe
    return tr.X[:p.n_train], tr.y[:p.n_train], te.X[:p.n_test], te.y[:p.n_test], 10


# files -----------------------------------------------------------------

def _write_csv(path: str, header, rows) -> None:
    tv.write_rows(path, [dict(zip(header, r)) if not isinstance(r, dict) else r for r in rows], header)


def _write_json_atomic(path: str, obj) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _snapshot_name(epoch: int) -> str:
    return f"epoch_{epoch:04d}.ngcl"


def _load_run(checkpoint: str):
    try:
        params, _, meta = load_checkpoint(checkpoint)
    except FileNotFoundError:
        raise ArtifactError(f"checkpoint not found: {checkpoint}") from None
    except (CheckpointError, ValueError, UnicodeDecodeError) as e:
        raise ArtifactError(f"corrupt checkpoint {checkpoint}: {e}") from None
    if not isinstance(meta, dict) or "run" not in meta:
        raise ArtifactError(f"checkpoint {checkpoint} carries no run configuration")
    try:
        cfg = parse_config(meta["run"])
    except UsageError as e:
        raise ArtifactError(f"checkpoint {checkpoint}: {e}") from None
    d = params["enc.0.W"].shape[0] if "enc.0.W" in params else 0
    return params, cfg, cfg.model_spec(d), meta


# commands --------------------------------------------------------------

def cmd_train(args) -> int:
    cfg, raw = load_config(args.config)
    out = args.out or cfg.output.dir
    os.makedirs(out, exist_ok=True)
    started = _utc_now()
    source = build_source(cfg)
    tcfg = cfg.train_config()
    mspec = cfg.model_spec(source.d)
    emitted = []
    snap_dir = os.path.join(out, "snapshots")

    def snapshot(epoch, params, state):
        os.makedirs(snap_dir, exist_ok=True)
        p = os.path.join(snap_dir, _snapshot_name(epoch))
        save_checkpoint(p, params, state, {"run": cfg.canonical(), "epoch": epoch})
        emitted.append(os.path.relpath(p, out))

    log.info("training %s for %d epochs", method_name(mspec, tcfg.strategy), tcfg.epochs)
    res = train(tcfg, mspec, source, snapshot=snapshot)
    metrics_path = os.path.join(out, "metrics.csv")
    write_metrics_csv(metrics_path, res.rows)
    ckpt = os.path.join(out, "checkpoint.ngcl")
    save_checkpoint(ckpt, res.params, res.opt_state, {"run": cfg.canonical(), "epoch": tcfg.epochs})
    emitted = ["metrics.csv", "checkpoint.ngcl"] + emitted
    manifest = {
        "config_sha256": hashlib.sha256(raw).hexdigest(),
        "seed": tcfg.seed,
        "code_version": __version__,
        "started": started,
        "finished": _utc_now(),
        "files": emitted,
    }
    _write_json_atomic(os.path.join(out, "manifest.json"), manifest)
    print(f"wrote {len(emitted)} files to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, cfg, mspec, _ = _load_run(args.checkpoint)
    Xtr, ytr, Xte, yte, n_cls = _labeled_splits(cfg, args.data)
    if Xtr.shape[1] != mspec.d:
        raise ArtifactError(f"dataset width {Xtr.shape[1]} does not match checkpoint input width {mspec.d}")
    strategy = cfg.strategy()
    method = method_name(mspec, strategy)
    out = args.out or os.path.dirname(os.path.abspath(args.checkpoint))
    os.makedirs(out, exist_ok=True)
    Ftr = representation(params, mspec, strategy, Xtr)
    try:
        rep = metrics_report(Ftr, ytr, n_classes=n_cls)
    except MetricError as e:
        print(f"warning: metrics undefined: {e}", file=sys.stderr)
        row = {"method": method, **{k: float("nan") for k in INTERP_HEADER[1:]}}
    else:
        row = {"method": method, **rep.row()}
    _write_csv(os.path.join(out, "interp.csv"), INTERP_HEADER, [row])
    if args.probe or cfg.eval.probe.enabled:
        p = cfg.eval.probe
        Fte = representation(params, mspec, strategy, Xte)
        pr = linear_probe(Ftr, ytr, Fte, yte, lr=p.lr, epochs=p.epochs, n_classes=n_cls)
        _write_csv(os.path.join(out, "probe.csv"), PROBE_HEADER, [(method, pr.top1, pr.top5)])
    if args.retrieval or cfg.eval.retrieval.enabled:
        ks = tuple(args.ks or cfg.eval.retrieval.ks)
        dims = args.retrieval_dims if args.retrieval_dims is not None else cfg.eval.retrieval.dims
        try:
            rr = retrieval(Ftr, ytr, Ftr, ytr, ks=ks, n_dims=dims, same_set=True)
        except ValueError as e:
            raise UsageError(str(e)) from None
        used = mspec.K if dims is None else dims
        _write_csv(os.path.join(out, "retrieval.csv"), RETRIEVAL_HEADER,
                   [(method, k, used, rr.precision[k]) for k in ks])
    print(f"wrote evaluation tables to {out}")
    return EXIT_OK


_EPOCH_RE = re.compile(r"epoch_(\d+)\.ngcl$")


def cmd_diagnose(args) -> int:
    if not os.path.isdir(args.snapshots):
        raise UsageError(f"snapshot directory not found: {args.snapshots}")
    files = sorted(f for f in os.listdir(args.snapshots) if _EPOCH_RE.search(f))
    if len(files) < 3:
        raise UsageError(f"need at least 3 snapshots in {args.snapshots}, found {len(files)}")
    stats = GradStatsLog()
    source = None
    for f in files:
        params, cfg, mspec, meta = _load_run(os.path.join(args.snapshots, f))
        if source is None:
            source = build_source(cfg)
        epoch = int(meta.get("epoch", _EPOCH_RE.search(f).group(1)))
        stats.append(epoch, *grad_stats(params, mspec, cfg.train_config(), source))
    rows = tv.dynamics_rows(stats)
    out = args.out or os.path.dirname(os.path.abspath(args.snapshots.rstrip("/")))
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, "dynamics.csv")
    tv.write_rows(path, rows, tv.DYNAMICS_HEADER)
    print(f"wrote {path} ({len(rows)} snapshots)")
    return EXIT_OK


SUITE_NAMES = (*tv.SUITES, "all")


def cmd_verify(args) -> int:
    names = list(tv.SUITES) if args.suite == "all" else [args.suite]
    out = args.out
    if out:
        os.makedirs(out, exist_ok=True)
    codes = []
    for name in names:
        kw = {"seeds": tuple(args.seeds)} if args.seeds else {}
        res = tv.SUITES[name](**kw)
        print(f"[{name}]")
        for line in res.lines():
            print(f"  {line}")
        if out:
            for fname, rows in res.tables.items():
                if rows:
                    tv.write_rows(os.path.join(out, fname), rows)
        codes.append(EXIT_OK if res.passed else EXIT_FAIL)
    return max(codes)


def cmd_schema(args) -> int:
    text = json.dumps(config_schema(), indent=2, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# entry point -----------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bayesncl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a RunConfig JSON file")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (overrides output.dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="interpretability, probe and retrieval tables for a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="CSV dataset (label,f0,...); default: the run's own data")
    e.add_argument("--probe", action="store_true")
    e.add_argument("--retrieval", action="store_true")
    e.add_argument("--retrieval-dims", type=int)
    e.add_argument("--ks", type=int, nargs="+")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("diagnose", help="AF/GV/SC rank correlations over training snapshots")
    d.add_argument("snapshots")
    d.add_argument("--out")
    d.set_defaults(func=cmd_diagnose)

    v = sub.add_parser("verify", help="run a theory verification suite")
    v.add_argument("suite", choices=SUITE_NAMES)
    v.add_argument("--out")
    v.add_argument("--seeds", type=int, nargs="+")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("schema", help="print the RunConfig JSON schema")
    s.add_argument("--out")
    s.set_defaults(func=cmd_schema)
    return p


def _threads() -> int:
    raw = os.environ.get("NGCL_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"NGCL_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"NGCL_THREADS must be a positive integer, got {raw!r}")
    return n


def main(argv=None) -> int:
    from threadpoolctl import threadpool_limits

    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with threadpool_limits(limits=_threads()):
            return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ArtifactError as e:
        print(f"artifact error: {e}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
