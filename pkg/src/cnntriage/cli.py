"""cnntriage command line: prepare, train, triage, eval.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 training or
inference error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .classifier import (
    ManifestSource,
    ModelStoreError,
    ShapeError,
    build_config,
    init_from_pretrained,
)
from .classifier.training import write_loss_trace
from .config import SYNTHETIC_PRESET, ConfigError, RunConfig
from .conglomerate import TrainingError, TriagePolicy, load_ensemble, save_ensemble, train_ensemble
from .dataset import (
    DatasetError,
    ManifestNotFoundError,
    class_distribution,
    load_image,
    load_manifest,
    split,
    write_manifest,
)
from .evaluation import collect_votes, evaluate_votes, sweep_threshold
from .synthetic import make_synthetic, write_synthetic
from .triage import order, render_report, score_batch

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("cnntriage")

# flag -> RunConfig field
FLAG_FIELDS = {
    "manifest": "manifest", "image_dir": "image_dir", "output_dir": "output_dir",
    "model_store": "model_store", "test_fraction": "test_fraction", "seed": "seed",
    "arch": "arch", "n": "n", "m": "m", "beta": "beta", "tau": "tau", "lr": "learning_rate",
    "epochs": "epochs", "batch_size": "batch_size", "batches_per_epoch": "batches_per_epoch",
    "jobs": "jobs", "baseline": "baseline", "pretrained": "pretrained",
}


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override its values")
    p.add_argument("--manifest")
    p.add_argument("--image-dir")
    p.add_argument("--output-dir")
    p.add_argument("--model-store")
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--arch", choices=["vgg16", "tiny"])
    p.add_argument("--n", type=int)
    p.add_argument("--m", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--batches-per-epoch", type=int)
    p.add_argument("--baseline", choices=["inverse-frequency", "quoted"])
    p.add_argument("--jobs", type=int)
    p.add_argument("--pretrained", help="model store whose conv layers seed every member")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cnntriage", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="relabel, split and summarise a manifest")
    _common(p)
    p.add_argument("--synthetic", action="store_true",
                   help="generate the offline synthetic lesion fixture first")

    p = sub.add_parser("train", help="train the ensemble and write the model store")
    _common(p)

    p = sub.add_parser("triage", help="order images from most to least critical")
    _common(p)
    p.add_argument("images", nargs="*", help="image files to triage")
    p.add_argument("--image-list", help="text file with one image path per line")

    p = sub.add_parser("eval", help="per-class accuracy on the test split")
    _common(p)
    p.add_argument("--test-manifest", help="defaults to <output_dir>/test.csv")
    p.add_argument("--sweep", help="comma-separated thresholds, e.g. 1,3,5,7,9")
    return parser


def resolve_config(args: argparse.Namespace, presets: dict | None = None) -> RunConfig:
    overrides = {field: getattr(args, flag, None) for flag, field in FLAG_FIELDS.items()}
    cfg = RunConfig.from_sources(args.config, presets, overrides)
    cfg.validate()
    return cfg


def cmd_prepare(args) -> int:
    presets = dict(SYNTHETIC_PRESET) if args.synthetic else None
    cfg = resolve_config(args, presets)
    out = Path(cfg.output_dir)
    if args.synthetic:
        total = cfg.synthetic_train + cfg.synthetic_test
        if args.test_fraction is None:
            cfg.test_fraction = cfg.synthetic_test / total
        size = cfg.input_resolution[0]
        data = make_synthetic(total, seed=cfg.seed, size=size)
        manifest = write_synthetic(data, out / "synthetic")
        cfg.manifest, cfg.image_dir = str(manifest), str(out / "synthetic" / "images")
        print(f"wrote {total} synthetic images to {out / 'synthetic'}")

    entries = load_manifest(cfg.manifest, cfg.image_dir)
    dist = class_distribution(entries)
    train_set, test_set = split(entries, cfg.test_fraction, cfg.seed)
    out.mkdir(parents=True, exist_ok=True)
    write_manifest(train_set, out / "train.csv")
    write_manifest(test_set, out / "test.csv")
    train_dist = class_distribution(train_set)
    report = {
        "entries": len(entries),
        "distribution": dist.to_dict(),
        "baseline_weights": cfg.baseline_weights(dist).to_dict(),
        "train": {"entries": len(train_set), "distribution": train_dist.to_dict(),
                  "baseline_weights": cfg.baseline_weights(train_dist).to_dict()},
        "test": {"entries": len(test_set),
                 "distribution": class_distribution(test_set).to_dict()},
    }
    (out / "distribution.json").write_text(json.dumps(report, indent=2) + "\n")
    cfg.write(out / "run_config.json")
    print(f"{len(entries)} entries: critical {dist.n_critical} ({dist.f_critical:.3f}), "
          f"non-critical {dist.n_noncritical} ({dist.f_noncritical:.3f})")
    print(f"train {len(train_set)} / test {len(test_set)} -> {out}")
    return EXIT_OK


def _split_manifest(cfg: RunConfig, name: str, explicit: str | None = None) -> Path:
    path = Path(explicit) if explicit else Path(cfg.output_dir) / name
    if not path.is_file():
        raise ManifestNotFoundError(f"manifest not found: {path} (run `cnntriage prepare`?)")
    return path


def _source(cfg: RunConfig, manifest: Path) -> ManifestSource:
    entries = load_manifest(manifest, cfg.image_dir)
    h, w = cfg.input_resolution
    return ManifestSource(entries, (h, w), cache=h * w <= 64 * 64)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    source = _source(cfg, _split_manifest(cfg, "train.csv"))
    baseline = cfg.baseline_weights(class_distribution(source.entries))
    spec = cfg.ensemble_spec(baseline)
    net = build_config(cfg.arch)
    print(f"training {spec.n} x {net.name} on {len(source)} images, baseline "
          f"w_c={baseline.w_critical:.4f} w_nc={baseline.w_noncritical:.4f}")
    init = None
    if cfg.pretrained:
        def init(seed):
            return init_from_pretrained(net, cfg.pretrained, seed)
    ensemble, results = train_ensemble(spec, net, source, jobs=cfg.jobs, init=init)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, (res, w) in enumerate(zip(results, ensemble.member_weights)):
        for epoch, loss in enumerate(res.epoch_losses()):
            print(f"member {k} (w_c={w.w_critical:.3f}, w_nc={w.w_noncritical:.3f}) "
                  f"epoch {epoch + 1:>3}  loss {loss:.5f}")
        write_loss_trace(res.trace, out / f"loss_member_{k}.csv")
    save_ensemble(ensemble, cfg.model_store)
    print(f"ensemble {ensemble.identifier} saved to {cfg.model_store}")
    return EXIT_OK


def _image_paths(args) -> list[Path]:
    paths = [Path(p) for p in args.images]
    if args.image_list:
        lst = Path(args.image_list)
        if not lst.is_file():
            raise UsageError(f"image list not found: {lst}")
        paths += [Path(line.strip()) for line in lst.read_text().splitlines() if line.strip()]
    if not paths:
        raise UsageError("no images given to triage")
    return paths


def cmd_triage(args) -> int:
    cfg = resolve_config(args)
    paths = _image_paths(args)
    store = Path(cfg.model_store)
    if not (store / "ensemble.json").is_file():
        raise ModelStoreError(f"no ensemble store at {store} (run `cnntriage train`?)")
    ensemble = load_ensemble(store)
    res = ensemble.config.input_resolution
    images = [(p.stem, load_image(p, res)) for p in paths]
    policy = TriagePolicy(cfg.tau)
    report = order(score_batch(ensemble, images, policy), policy, ensemble.identifier)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "triage_report.json").write_bytes(render_report(report, "json"))
    (out / "triage_report.csv").write_bytes(render_report(report, "csv"))
    sys.stdout.write(render_report(report, "text").decode())
    return EXIT_OK


def _parse_sweep(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--sweep expects comma-separated numbers, got {text!r}") from None


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    thresholds = _parse_sweep(args.sweep) if args.sweep else None
    if thresholds:
        for t in thresholds:
            TriagePolicy(t).check(cfg.m)
    source = _source(cfg, _split_manifest(cfg, "test.csv", args.test_manifest))
    store = Path(cfg.model_store)
    if not (store / "ensemble.json").is_file():
        raise ModelStoreError(f"no ensemble store at {store} (run `cnntriage train`?)")
    ensemble = load_ensemble(store)
    cache = collect_votes(ensemble, source)
    result = evaluate_votes(cache, TriagePolicy(cfg.tau))
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.write_json(out / "eval.json")
    result.write_histogram_csv(out / "index_histogram.csv")
    print(f"threshold {cfg.tau:g}: critical acc {result.acc_critical:.3f} "
          f"({result.n_critical} images), non-critical acc {result.acc_noncritical:.3f} "
          f"({result.n_noncritical} images)")
    if thresholds:
        sweep = sweep_threshold(None, cache, thresholds)
        (out / "sweep.json").write_text(json.dumps(
            [{"threshold": t, "result": r.to_dict()} for t, r in sweep], indent=2) + "\n")
        for t, r in sweep:
            print(f"  tau={t:g}: critical {r.acc_critical:.3f}  "
                  f"non-critical {r.acc_noncritical:.3f}")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "triage": cmd_triage, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, ModelStoreError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
