"""Command-line pipeline: pretrain, train, eval, export-latents, mine-check.

Every command reads a flat key=value config (overridable with --set) and
writes its artifacts under out_dir/<config-hash>-s<seed>/. Exit codes:
0 success, 2 config error, 3 data error, 4 numeric divergence or a failed
numeric self-check.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig, load_config, load_source, three_way_split
from .data import synth_blobs
from .errors import ConfigError, DataError, NumericError
from .evaluation import (
    ClassifierConfig,
    EvalReport,
    ProbeConfig,
    accuracy,
    classifier_accuracy,
    defense_rows,
    eer,
    encode_flat,
    roc_auc,
    train_classifier,
    train_probe,
    train_substitute,
    write_defense_csv,
)
from .similarity import LatentTable, export_csv, farthest, kmeans, nearest
from .training import pretrain_ae, train_nre

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _jsonl_writer(path: Path):
    fh = open(path, "w", encoding="utf-8")

    def write(record: dict):
        line = json.dumps(record, sort_keys=True)
        fh.write(line + "\n")
        fh.flush()
        print(line)

    return write, fh


def _prepare_run_dir(cfg: RunConfig) -> Path:
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.canonical(), encoding="utf-8")
    return run_dir


def _pretrain_ckpt_path(cfg: RunConfig, run_dir: Path) -> Path:
    path = Path(cfg.pretrain_ckpt) if cfg.pretrain_ckpt else run_dir / "pretrain.ckpt"
    if not path.exists():
        raise ConfigError(f"pretrain_ckpt: checkpoint not found at {path}")
    return path


def _nre_ckpt_path(cfg: RunConfig, run_dir: Path) -> Path:
    path = Path(cfg.nre_ckpt) if cfg.nre_ckpt else run_dir / "nre.ckpt"
    if not path.exists():
        raise ConfigError(f"nre_ckpt: checkpoint not found at {path}")
    return path


def _load_ae_checked(cfg: RunConfig, path: Path):
    encoder, decoder, meta = checkpoint.load_ae(path)
    ckpt_arch = meta.get("config", {}).get("arch")
    if ckpt_arch is not None and tuple(ckpt_arch) != tuple(cfg.arch):
        raise ConfigError(
            f"arch: checkpoint {path} was trained with {tuple(ckpt_arch)}, config says {tuple(cfg.arch)}"
        )
    return encoder, decoder, meta


def cmd_pretrain(cfg: RunConfig, args) -> int:
    train, _, _ = three_way_split(cfg, load_source(cfg))
    run_dir = _prepare_run_dir(cfg)
    write, fh = _jsonl_writer(run_dir / "pretrain_metrics.jsonl")
    try:
        encoder, decoder, _ = pretrain_ae(
            train, list(cfg.arch), cfg.pretrain_epochs, cfg.lr, cfg.seed,
            batch_size=cfg.batch_size, on_epoch=write,
        )
    finally:
        fh.close()
    ckpt = run_dir / "pretrain.ckpt"
    checkpoint.save_ae(ckpt, encoder, decoder,
                       config={"arch": list(cfg.arch), "pretrain_epochs": cfg.pretrain_epochs,
                               "lr": cfg.lr, "batch_size": cfg.batch_size},
                       seed=cfg.seed)
    print(f"pretrain checkpoint: {ckpt}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    train, _, _ = three_way_split(cfg, load_source(cfg))
    run_dir = _prepare_run_dir(cfg)
    encoder, decoder, _ = _load_ae_checked(cfg, _pretrain_ckpt_path(cfg, run_dir))
    ckpt = run_dir / "nre.ckpt"
    write, fh = _jsonl_writer(run_dir / "train_metrics.jsonl")

    def on_epoch(record, model):
        write(record)
        checkpoint.save_nre(ckpt, model)

    try:
        train_nre((encoder, decoder), train, cfg.train_config(), cfg.loss_weights(),
                  on_epoch=on_epoch)
    finally:
        fh.close()
    print(f"relational checkpoint: {ckpt}")
    return EXIT_OK


def _report_config(cfg: RunConfig, extra: dict | None = None) -> dict:
    doc = {"config_hash": cfg.config_hash(), "data": cfg.data,
           "n_train": cfg.n_train, "n_test": cfg.n_test}
    if extra:
        doc.update(extra)
    return doc


def cmd_eval(cfg: RunConfig, args) -> int:
    task = args.task
    if task not in ("probe", "defense", "anomaly"):
        raise ConfigError(f"unknown eval task {task!r}")
    ds = load_source(cfg)
    train, test, substitute = three_way_split(cfg, ds)
    if train.labels is None:
        raise DataError("evaluation tasks need labeled data")
    run_dir = _prepare_run_dir(cfg)
    ae_pair = None
    if task in ("probe", "defense", "anomaly"):
        enc, dec, _ = _load_ae_checked(cfg, _pretrain_ckpt_path(cfg, run_dir))
        ae_pair = (enc, dec)
    model = checkpoint.load_nre(_nre_ckpt_path(cfg, run_dir))

    if task == "probe":
        probe_cfg = ProbeConfig(epochs=cfg.probe_epochs, lr=cfg.probe_lr,
                                l2=cfg.probe_l2, seed=cfg.seed)
        metrics = {}
        for name, enc_net in (("nre", model.encoder), ("ae", ae_pair[0])):
            lat_train = encode_flat(enc_net, train.flat())
            lat_test = encode_flat(enc_net, test.flat())
            probe = train_probe(lat_train, train.labels, probe_cfg)
            metrics[f"{name}_accuracy"] = accuracy(probe.predict(lat_test), test.labels)
        report = EvalReport(task="probe", metrics=metrics,
                            config=_report_config(cfg, {"probe_epochs": cfg.probe_epochs}),
                            seed=cfg.seed)
        report.save(run_dir / "probe_report.json")
        print(report.to_json())
        return EXIT_OK

    if task == "defense":
        if substitute is None or len(substitute) == 0:
            raise ConfigError("n_substitute: defense needs a substitute training split")
        n_classes = int(ds.labels.max()) + 1
        target = train_classifier(
            train.flat(), train.labels, n_classes,
            ClassifierConfig(hidden=cfg.classifier_hidden, epochs=cfg.classifier_epochs,
                             lr=cfg.classifier_lr, seed=cfg.seed),
        )
        substitute_net = train_substitute(
            substitute.flat(), substitute.labels, n_classes,
            ClassifierConfig(hidden=cfg.substitute_hidden, epochs=cfg.substitute_epochs,
                             lr=cfg.classifier_lr, seed=cfg.seed),
        )
        rows = defense_rows(target, substitute_net, model, ae_pair,
                            test.flat(), test.labels, cfg.epsilons)
        write_defense_csv(run_dir / "defense.csv", rows)
        metrics = {"clean_accuracy": classifier_accuracy(target, test.flat(), test.labels)}
        for row in rows:
            tag = f"eps{row['epsilon']:g}"
            metrics[f"no_defense_{tag}"] = row["no_defense"]
            metrics[f"plain_ae_refine_{tag}"] = row["plain_ae_refine"]
            metrics[f"nre_refine_{tag}"] = row["nre_refine"]
        report = EvalReport(task="defense", metrics=metrics,
                            config=_report_config(cfg, {"epsilons": list(cfg.epsilons)}),
                            seed=cfg.seed)
        report.save(run_dir / "defense_report.json")
        print(report.to_json())
        return EXIT_OK

    # anomaly
    from .evaluation import anomaly_score

    labels = (test.labels == cfg.anomaly_holdout).astype(np.int64)
    if labels.sum() == 0 or labels.sum() == labels.size:
        raise DataError(
            f"anomaly_holdout={cfg.anomaly_holdout}: test split must contain both "
            "normal and holdout samples"
        )
    metrics = {}
    for name, scorer in (("nre", model), ("ae", ae_pair)):
        scores = anomaly_score(scorer, test.flat())
        metrics[f"{name}_auc"] = roc_auc(scores, labels)
        metrics[f"{name}_eer"] = eer(scores, labels)
    report = EvalReport(task="anomaly", metrics=metrics,
                        config=_report_config(cfg, {"anomaly_holdout": cfg.anomaly_holdout}),
                        seed=cfg.seed)
    report.save(run_dir / "anomaly_report.json")
    print(report.to_json())
    return EXIT_OK


def cmd_export_latents(cfg: RunConfig, args) -> int:
    train, _, _ = three_way_split(cfg, load_source(cfg))
    run_dir = _prepare_run_dir(cfg)
    if args.which in ("nre", "sim"):
        model = checkpoint.load_nre(_nre_ckpt_path(cfg, run_dir))
        net = model.encoder if args.which == "nre" else model.sim_encoder
    else:
        enc, _, _ = _load_ae_checked(cfg, _pretrain_ckpt_path(cfg, run_dir))
        net = enc
    from .similarity import encode_all

    table = encode_all(net.copy(frozen=True), train)
    out = Path(args.out) if args.out else run_dir / "latents.csv"
    export_csv(table, out)
    print(f"latent table: {out} ({len(table)} rows x {table.dim} columns)")
    return EXIT_OK


def cmd_mine_check(cfg: RunConfig, args) -> int:
    """Single-cluster mining vs an exhaustive scan on a small dataset."""
    ds = synth_blobs(4, 60, 8, 0.3, seed=cfg.seed)
    table = LatentTable(latents=ds.flat(), dataset_id=ds.name, fingerprint="raw-pixels")
    clusters = kmeans(table, 1, seed=cfg.seed)
    lat = table.latents.astype(np.float64)
    norms = np.linalg.norm(lat, axis=1)
    mismatches = 0
    for i in range(len(table)):
        sims = lat @ lat[i]
        denom = norms * norms[i]
        sims = np.where(denom == 0, 0.0, sims / np.where(denom == 0, 1.0, denom))
        sims[i] = np.nan
        expect_near = int(np.nanargmax(sims))
        expect_far = int(np.nanargmin(sims))
        got_near = int(nearest(table.latents[i], table, clusters, 1, exclude_index=i)[0][0])
        got_far = int(farthest(table.latents[i], table, clusters, 1, exclude=(i,))[0][0])
        if got_near != expect_near or got_far != expect_far:
            mismatches += 1
            print(f"mismatch at row {i}: nearest {got_near} vs {expect_near}, "
                  f"farthest {got_far} vs {expect_far}")
    if mismatches:
        print(f"mine-check FAIL: {mismatches}/{len(table)} rows disagree with the exhaustive scan")
        return EXIT_NUMERIC
    print(f"mine-check PASS: {len(table)} rows match the exhaustive scan")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nre", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key = value config file")
        p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("pretrain", help="train the plain reconstruction autoencoder")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="fine-tune with the relational loss")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run an evaluation harness")
    common(p)
    p.add_argument("task", choices=("probe", "defense", "anomaly"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-latents", help="dump a latent table as CSV")
    common(p)
    p.add_argument("--which", choices=("nre", "sim", "ae"), default="nre")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_export_latents)

    p = sub.add_parser("mine-check", help="verify clustered mining against the exhaustive scan")
    common(p)
    p.set_defaults(func=cmd_mine_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        return args.func(cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
