"""Command-line pipeline: preprocess, extract, train, finetune, evaluate, sweep.

Exit codes: 0 success, 1 partial (some items skipped or failed), 2 fatal.
Fatal errors are printed as one line, ``error: <Kind>: <message>``.
"""

import argparse
import csv
import logging
import sys
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .audio import load_canonical, read_wav, write_wav
from .config import format_config, load_config, resolve
from .dataset import (
    feature_path,
    load_feature_dir,
    read_manifest,
    split_dataset,
    write_features,
    write_manifest,
)
from .errors import AudioError, ConfigError, FeatureError, NonwordError
from .evaluation import evaluate
from .features import build_mel_filterbank, compute_warp_factor, mel_spectrogram
from .model import read_checkpoint, write_checkpoint
from .train import finetune_word_dependent, sweep_feature_sets, sweep_to_csv, train_word_independent
from .vad import trim

log = logging.getLogger("nonword")

EXIT_OK, EXIT_PARTIAL, EXIT_FATAL = 0, 1, 2
MODE_CHOICES = ("ft-last-layer", "ft-all-layers", "ft-add-layer", "from-scratch")


def _resolve_path(base_dir, p):
    p = Path(p)
    return p if p.is_absolute() else Path(base_dir) / p


def _prepare_out(cfg, command):
    if not cfg.out_dir:
        raise ConfigError("--out-dir is required")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}.config").write_text(format_config(cfg), encoding="utf-8")
    return out


def _require(cfg, *keys):
    for key in keys:
        if not getattr(cfg, key):
            raise ConfigError(f"--{key.replace('_', '-')} is required")


def _write_rows(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _map(fn, items, jobs):
    if jobs <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def cmd_preprocess(cfg):
    _require(cfg, "manifest")
    manifest = read_manifest(cfg.manifest, cfg.positive_label)
    out = _prepare_out(cfg, "preprocess")
    (out / "audio").mkdir(exist_ok=True)
    src_dir = Path(cfg.manifest).parent
    vad_cfg = cfg.vad_config()

    def one(rec):
        try:
            clip = trim(load_canonical(_resolve_path(src_dir, rec.path), rec.utterance_id), vad_cfg)
        except (AudioError, OSError) as exc:
            return rec, getattr(exc, "kind", type(exc).__name__) + f": {exc}"
        rel = f"audio/{rec.utterance_id}.wav"
        write_wav(out / rel, clip)
        return replace(rec, path=rel), None

    kept, skipped = [], []
    for rec, err in _map(one, manifest.records, cfg.jobs):
        if err is None:
            kept.append(rec)
        else:
            log.warning("skipping %s: %s", rec.utterance_id, err)
            skipped.append((rec.utterance_id, err))
    write_manifest(out / "manifest.csv", replace(manifest, records=tuple(kept)))
    _write_rows(out / "skipped.csv", ("utterance_id", "reason"), skipped)
    print(f"preprocessed {len(kept)} utterance(s), skipped {len(skipped)}")
    return EXIT_OK if kept else EXIT_PARTIAL


def cmd_extract(cfg):
    _require(cfg, "manifest")
    if cfg.vtln and cfg.reference_f0_hz is None:
        raise ConfigError("--vtln needs --reference-f0")
    manifest = read_manifest(cfg.manifest, cfg.positive_label)
    out = _prepare_out(cfg, "extract")
    src_dir = Path(cfg.manifest).parent
    stft_cfg = cfg.stft_config()

    def load(rec):
        return read_wav(_resolve_path(src_dir, rec.path), rec.utterance_id)

    clips = dict(zip((r.utterance_id for r in manifest.records), _map(load, manifest.records, cfg.jobs)))
    alphas = defaultdict(lambda: 1.0)
    if cfg.vtln:
        by_speaker = defaultdict(list)
        for rec in manifest.records:
            by_speaker[rec.speaker_id].append(clips[rec.utterance_id])
        rows = []
        for spk in sorted(by_speaker):
            wf = compute_warp_factor(by_speaker[spk], cfg.reference_f0_hz, speaker_id=spk)
            alphas[spk] = wf.alpha
            rows.append((spk, repr(wf.mean_f0_hz), repr(wf.alpha)))
        _write_rows(out / "warp_factors.csv", ("speaker_id", "mean_f0_hz", "alpha"), rows)

    banks = {}

    def bank_for(rate, alpha):
        key = (rate, alpha)
        if key not in banks:
            banks[key] = build_mel_filterbank(rate, stft_cfg.n_fft, cfg.n_mels, alpha)
        return banks[key]

    for rec in manifest.records:
        clip = clips[rec.utterance_id]
        bank_for(clip.sample_rate, alphas[rec.speaker_id])

    def one(rec):
        clip = clips[rec.utterance_id]
        try:
            fm = mel_spectrogram(clip, stft_cfg, banks[(clip.sample_rate, alphas[rec.speaker_id])], rec.utterance_id)
        except FeatureError as exc:
            return rec, f"{exc.kind}: {exc}"
        write_features(feature_path(out, rec.utterance_id), fm)
        return replace(rec, path=feature_path(out, rec.utterance_id).name), None

    kept, skipped = [], []
    for rec, err in _map(one, manifest.records, cfg.jobs):
        (kept.append(rec) if err is None else skipped.append((rec.utterance_id, err)))
    write_manifest(out / "manifest.csv", replace(manifest, records=tuple(kept)))
    if skipped:
        _write_rows(out / "skipped.csv", ("utterance_id", "reason"), skipped)
    print(f"extracted {len(kept)} feature file(s), skipped {len(skipped)}")
    return EXIT_OK if not skipped else EXIT_PARTIAL


def _split_if_needed(cfg, manifest, out):
    if not manifest.is_split:
        manifest = split_dataset(manifest, seed=cfg.seed, speaker_disjoint=cfg.speaker_disjoint)
    write_manifest(out / "manifest.csv", manifest)
    return manifest


def cmd_train(cfg):
    _require(cfg, "manifest", "features")
    manifest = read_manifest(cfg.manifest, cfg.positive_label)
    out = _prepare_out(cfg, "train")
    manifest = _split_if_needed(cfg, manifest, out)
    features = load_feature_dir(cfg.features, manifest)
    resume = read_checkpoint(cfg.resume) if cfg.resume else None
    model, trainlog = train_word_independent(manifest, features, replace(cfg.train_config(), finetune_mode="none"), resume=resume)
    model.metadata["split_mode"] = "speaker_disjoint" if cfg.speaker_disjoint else "utterance"
    write_checkpoint(out / "model.nwck", model)
    (out / "train_log.csv").write_text(trainlog.to_csv(), encoding="utf-8")
    print(f"trained {len(trainlog.epochs)} epoch(s), best epoch {trainlog.best_epoch} ({trainlog.stop_reason})")
    return EXIT_OK


def _nonword_ids(cfg, manifest):
    if cfg.nonword == "all":
        return manifest.nonword_ids
    try:
        wid = int(cfg.nonword)
    except ValueError:
        raise ConfigError(f"--nonword must be 1..7 or 'all', got {cfg.nonword!r}") from None
    if not 1 <= wid <= 7:
        raise ConfigError(f"--nonword must be 1..7 or 'all', got {wid}")
    return [wid]


def cmd_finetune(cfg):
    _require(cfg, "manifest", "features", "base_model")
    if cfg.finetune_mode == "none":
        raise ConfigError("--mode is required")
    manifest = read_manifest(cfg.manifest, cfg.positive_label)
    if not manifest.is_split:
        raise ConfigError("finetune needs a split manifest (use the one written by 'train')")
    out = _prepare_out(cfg, "finetune")
    features = load_feature_dir(cfg.features, manifest)
    base = read_checkpoint(cfg.base_model)
    tcfg = cfg.train_config()
    for wid in _nonword_ids(cfg, manifest):
        model, trainlog = finetune_word_dependent(base, manifest, features, wid, tcfg)
        write_checkpoint(out / f"word_{wid}.nwck", model)
        (out / f"train_log_word_{wid}.csv").write_text(trainlog.to_csv(), encoding="utf-8")
        print(f"nonword {wid}: {len(trainlog.epochs)} epoch(s), best epoch {trainlog.best_epoch}")
    return EXIT_OK


def cmd_evaluate(cfg):
    _require(cfg, "manifest", "features")
    if bool(cfg.model) == bool(cfg.models_dir):
        raise ConfigError("give exactly one of --model or --models-dir")
    manifest = read_manifest(cfg.manifest, cfg.positive_label)
    out = _prepare_out(cfg, "evaluate")
    test = manifest.subset(split="test")
    features = load_feature_dir(cfg.features, test)
    if cfg.model:
        models = read_checkpoint(cfg.model)
    else:
        models = {wid: read_checkpoint(Path(cfg.models_dir) / f"word_{wid}.nwck") for wid in test.nonword_ids}
    report = evaluate(models, manifest, features, threshold=cfg.threshold)
    (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    agg = report.aggregate
    print(
        f"accuracy {agg.accuracy:.3f} precision {agg.precision:.3f} "
        f"recall {agg.recall:.3f} auc {agg.auc:.3f} (auc sd {report.auc_std_dev:.3f})"
    )
    return EXIT_OK


def cmd_sweep(cfg):
    _require(cfg, "manifest", "feature_dirs")
    manifest = read_manifest(cfg.manifest, cfg.positive_label)
    out = _prepare_out(cfg, "sweep")
    manifest = _split_if_needed(cfg, manifest, out)
    rows = sweep_feature_sets(cfg.feature_dirs, manifest, replace(cfg.train_config(), finetune_mode="none"), jobs=cfg.jobs)
    (out / "sweep.csv").write_text(sweep_to_csv(rows), encoding="utf-8")
    failed = [r for r in rows if r.status != "ok"]
    print(f"swept {len(rows)} feature set(s), {len(failed)} failed")
    return EXIT_PARTIAL if failed else EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "extract": cmd_extract,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="nonword", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file (flags override it)")
        p.add_argument("--manifest", help="manifest CSV")
        p.add_argument("--out-dir", dest="out_dir", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int, help="worker threads")
        p.add_argument("--positive-label", dest="positive_label", choices=("correct", "incorrect"))
        p.add_argument("-v", "--verbose", action="store_true")

    def training(p):
        p.add_argument("--features", help="directory of <utterance_id>.nwf files")
        p.add_argument("--lr", type=float)
        p.add_argument("--max-epochs", dest="max_epochs", type=int)
        p.add_argument("--patience", help="early-stopping patience, or 'none'")
        p.add_argument("--batch-size", dest="batch_size", type=int)

    p = sub.add_parser("preprocess", help="resample to 16 kHz and trim silence")
    common(p)
    p.add_argument("--vad-floor-db", dest="vad_floor_db", type=float)
    p.add_argument("--hangover-frames", dest="hangover_frames", type=int)

    p = sub.add_parser("extract", help="128-band log-mel features, optionally VTLN-warped")
    common(p)
    p.add_argument("--vtln", action="store_true", default=None)
    p.add_argument("--reference-f0", dest="reference_f0_hz", type=float)

    p = sub.add_parser("train", help="train the word-independent model")
    common(p)
    training(p)
    p.add_argument("--speaker-disjoint", dest="speaker_disjoint", action="store_true", default=None)
    p.add_argument("--resume", help="checkpoint to continue training from")

    p = sub.add_parser("finetune", help="derive word-dependent models")
    common(p)
    training(p)
    p.add_argument("--base", dest="base_model", help="word-independent checkpoint")
    p.add_argument("--mode", dest="finetune_mode", choices=MODE_CHOICES)
    p.add_argument("--nonword", help="1..7 or 'all'")
    p.add_argument("--finetune-lr", dest="finetune_lr", type=float)

    p = sub.add_parser("evaluate", help="per-nonword test report")
    common(p)
    p.add_argument("--features", help="directory of <utterance_id>.nwf files")
    p.add_argument("--model", help="one word-independent checkpoint")
    p.add_argument("--models-dir", dest="models_dir", help="directory of word_<k>.nwck checkpoints")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("sweep", help="compare feature sets with word-independent models")
    common(p)
    training(p)
    p.add_argument("--feature-dirs", dest="feature_dirs", nargs="+")
    p.add_argument("--speaker-disjoint", dest="speaker_disjoint", action="store_true", default=None)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    if flags.get("finetune_mode"):
        flags["finetune_mode"] = flags["finetune_mode"].replace("-", "_")
    try:
        file_values = load_config(args.config) if args.config else {}
        cfg = resolve(file_values, flags)
        cfg = replace(cfg, finetune_mode=cfg.finetune_mode.replace("-", "_"))
        return COMMANDS[args.command](cfg)
    except (NonwordError, OSError, ValueError) as exc:
        kind = getattr(exc, "kind", type(exc).__name__)
        msg = " ".join(str(exc).split())
        print(f"error: {kind}: {msg}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
