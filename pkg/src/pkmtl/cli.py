"""Command-line pipelines: synth -> pairs -> train -> tune-scm / adapt-trm -> eval / eval-stream.

Every option can come from a flag or from a JSON ``--config`` file (keys are
the option names with ``_`` for ``-``); flags win over the file, the file wins
over built-in defaults.  Each run writes the resolved configuration to
``<out>/run-config.json``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import autodiff as ad
from . import dataset, evaluation, synthetic
from .adaptation import EmbeddingTable, PkMtlSystem, ScmParams, TrmModule, train_trm, tune_scm, validation_eer_fn
from .features import AudioFormatError, extract, read_wav, segment_stream, write_wav
from .metrics import ScoreSet, write_det_curve, write_histograms
from .model import (
    EncoderConfig, MtlModel, TrainingDiverged, build_validation, embed_batch, enrollment_embedding, label_indices,
    train_mtl,
)

logger = logging.getLogger("pkmtl")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code, self.kind = code, kind


def config_error(kind, message):
    return CliError(EXIT_CONFIG, kind, message)


def data_error(kind, message):
    return CliError(EXIT_DATA, kind, message)


# ---------------------------------------------------------------- option tables
# name -> (default, type, help); a None default marks a required option

COMMON = {
    "seed": (0, int, "random seed"),
    "out": (None, str, "output directory"),
}

OPTIONS = {
    "synth": {
        "n_speakers": (60, int, "number of synthetic speakers"),
        "n_keywords": (6, int, "number of command words"),
        "utts_per_pair": (4, int, "renditions per (speaker, word)"),
        "n_unknown_words": (2, int, "non-command words labelled Unknown"),
        "silence_per_speaker": (2, int, "noise-only clips per speaker (label Silence)"),
        "noise_level": (0.01, float, "additive noise standard deviation"),
        "val_fraction": (0.25, float, "share of speakers in validation"),
        "test_fraction": (0.25, float, "share of speakers in test"),
        "wav": (False, bool, "also write 16-bit WAV files and point the manifest at them"),
    },
    "ingest-gsc": {
        "root": (None, str, "Speech Commands v1 root directory"),
        "commands": (",".join(synthetic.COMMAND_WORDS), str, "comma-separated command words"),
        "silence_per_split": (0, int, "Silence clips cut from background noise per split"),
    },
    "pairs": {
        "manifest": (None, str, "manifest TSV"),
        "split": ("test", str, "train | validation | test"),
        "n_splits": (10, int, "number of pair splits"),
        "pairs_per_split": (16000, int, "keyword pairs per split (multiple of 4)"),
        "sv_pairs_per_split": (160000, int, "speaker-verification pairs per split (even)"),
    },
    "train": {
        "manifest": (None, str, "manifest TSV"),
        "epochs": (30, int, "training epochs"),
        "lambda_": (0.1, float, "speaker loss weight"),
        "batch_size": (64, int, "mini-batch size"),
        "lr": (1e-3, float, "Adam learning rate"),
        "feature_kind": ("log-mel", str, "log-mel | mfcc"),
        "feature_dim": (40, int, "feature dimension"),
        "cache_dir": ("", str, "feature cache directory (empty: no cache)"),
        "encoder": ("", str, "JSON file with encoder layers (empty: default encoder)"),
    },
    "tune-scm": {
        "manifest": (None, str, "manifest TSV"),
        "model": (None, str, "multi-task model checkpoint"),
        "pairs": (None, str, "validation pair file"),
        "split_id": (0, int, "pair split used for the search"),
        "task": ("TB", str, "TB | TO"),
        "target_far": (0.01, float, "target false-alarm rate"),
        "grid_step": (0.01, float, "alpha grid step"),
        "cache_dir": ("", str, "feature cache directory"),
    },
    "adapt-trm": {
        "manifest": (None, str, "manifest TSV"),
        "model": (None, str, "multi-task model checkpoint"),
        "pairs": ("", str, "validation pair file for best-epoch selection (empty: keep last epoch)"),
        "split_id": (0, int, "validation pair split"),
        "task": ("TB", str, "TB | TO"),
        "epochs": (50, int, "training epochs"),
        "lr": (1e-2, float, "Adam learning rate"),
        "batch_n": (0, int, "rows per batch (0: number of command words)"),
        "group_fraction": (0.5, float, "share of in-group negatives per row"),
        "gate": ("per-dim", str, "per-dim | per-embedding"),
        "cache_dir": ("", str, "feature cache directory"),
    },
    "enroll": {
        "manifest": (None, str, "manifest TSV"),
        "model": (None, str, "multi-task model checkpoint"),
        "split": ("test", str, "split whose speakers are enrolled"),
        "per_speaker": (1, int, "enrolment utterances per speaker"),
        "cache_dir": ("", str, "feature cache directory"),
    },
    "eval": {
        "manifest": (None, str, "manifest TSV"),
        "model": (None, str, "multi-task model checkpoint"),
        "pairs": (None, str, "test pair file"),
        "scm": ("", str, "comma-separated SCM parameter files"),
        "trm": ("", str, "comma-separated TRM checkpoints"),
        "enrollments": ("", str, "enrolment file (empty: the anchor is the enrolment)"),
        "cache_dir": ("", str, "feature cache directory"),
    },
    "eval-stream": {
        "manifest": (None, str, "manifest TSV"),
        "model": (None, str, "multi-task model checkpoint"),
        "pairs": (None, str, "test pair file (ts-tk pairs fix the thresholds)"),
        "scm": ("", str, "comma-separated SCM parameter files"),
        "trm": ("", str, "comma-separated TRM checkpoints"),
        "stream": ("", str, "stream WAV file (empty: synthesise one)"),
        "stream_seed": (1000, int, "speaker-pool seed of the synthetic stream"),
        "stream_segments": (300, int, "one-second segments in the synthetic stream"),
        "stream_speakers": (20, int, "speakers in the synthetic stream"),
        "cache_dir": ("", str, "feature cache directory"),
    },
    "model-info": {
        "model": (None, str, "multi-task model checkpoint"),
        "trm": ("", str, "comma-separated TRM checkpoints"),
    },
}


def _flag(name):
    return "--" + name.rstrip("_").replace("_", "-")


def build_parser():
    parser = argparse.ArgumentParser(prog="pkmtl", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd, help=_HELP[cmd])
        p.add_argument("--config", default=None, help="JSON file of option values (flags win)")
        p.add_argument("--log-level", default="WARNING", help="logging level")
        for name, (default, typ, text) in {**COMMON, **opts}.items():
            if cmd == "model-info" and name == "seed":
                continue
            shown = "required" if default is None else f"default: {default}"
            if typ is bool:
                p.add_argument(_flag(name), dest=name, action="store_true", default=None, help=f"{text}")
            else:
                p.add_argument(_flag(name), dest=name, type=typ, default=None, help=f"{text} ({shown})")
    return parser


_HELP = {
    "synth": "generate a synthetic corpus manifest",
    "ingest-gsc": "build a manifest from Speech Commands v1",
    "pairs": "make keyword and speaker-verification pair splits",
    "train": "train the multi-task keyword/speaker model",
    "tune-scm": "grid-search the score-combination weight",
    "adapt-trm": "train a task representation module",
    "enroll": "store speaker enrolment embeddings",
    "eval": "evaluate C/TB/TO/SV on pair splits",
    "eval-stream": "false-alarm rates on a general-negative stream",
    "model-info": "parameter counts",
}


def resolve(args):
    """Layer defaults < config file < flags; returns a plain dict."""
    opts = {**COMMON, **OPTIONS[args.command]}
    if args.command == "model-info":
        opts.pop("seed")
    from_file = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                from_file = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise config_error("bad-config-file", f"cannot read config {args.config}: {exc}") from None
        if not isinstance(from_file, dict):
            raise config_error("bad-config-file", "config file must hold a JSON object")
        from_file = {("lambda_" if k == "lambda" else k.replace("-", "_")): v for k, v in from_file.items()}
        unknown = sorted(set(from_file) - set(opts))
        if unknown:
            raise config_error("unknown-option", f"unknown option(s) in config file: {', '.join(unknown)}")
    cfg = {"command": args.command}
    for name, (default, typ, _) in opts.items():
        value = getattr(args, name)
        if value is None:
            value = from_file.get(name, default)
        if value is None and not (args.command == "model-info" and name == "out"):
            raise config_error("missing-option", f"{_flag(name)} is required")
        if value is not None:
            try:
                value = typ(value)
            except (TypeError, ValueError):
                raise config_error("bad-option", f"{_flag(name)}: cannot parse {value!r}") from None
        cfg[name] = value
    return cfg


def write_run_config(cfg):
    if not cfg.get("out"):
        return
    os.makedirs(cfg["out"], exist_ok=True)
    with open(os.path.join(cfg["out"], "run-config.json"), "w", encoding="utf-8") as fh:
        json.dump({("lambda" if k == "lambda_" else k): v for k, v in cfg.items()}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out(cfg, name):
    return os.path.join(cfg["out"], name)


def _check_choice(cfg, name, choices):
    if cfg[name] not in choices:
        raise config_error("bad-option", f"{_flag(name)} must be one of {', '.join(choices)}, got {cfg[name]!r}")


# ---------------------------------------------------------------- loading helpers

def load_manifest(path):
    if not os.path.exists(path):
        raise data_error("missing-manifest", f"manifest {path} does not exist")
    try:
        return dataset.read_manifest(path)
    except ValueError as exc:
        raise data_error("bad-manifest", str(exc)) from None


def load_model(path):
    if not os.path.exists(path):
        raise config_error("missing-checkpoint", f"checkpoint {path} does not exist")
    try:
        return MtlModel.load(path)
    except (ValueError, KeyError) as exc:
        raise data_error("bad-checkpoint", f"{path}: {exc}") from None


def load_pairs(path):
    if not os.path.exists(path):
        raise config_error("missing-pairs", f"pair file {path} does not exist")
    try:
        splits = dataset.read_pairs(path)
    except ValueError as exc:
        raise data_error("bad-pairs", str(exc)) from None
    kws = [s for s in splits if s.task == "kws-pairs"]
    sv = [s for s in splits if s.task == "sv-pairs"]
    return kws, sv


def _split_list(text):
    return [p for p in (text or "").split(",") if p]


def load_adapters(cfg):
    scm, trm = {}, {}
    for path in _split_list(cfg.get("scm")):
        if not os.path.exists(path):
            raise config_error("missing-checkpoint", f"SCM file {path} does not exist")
        with open(path, encoding="utf-8") as fh:
            p = ScmParams.from_text(fh.read())
        scm[p.task] = p
    for path in _split_list(cfg.get("trm")):
        if not os.path.exists(path):
            raise config_error("missing-checkpoint", f"TRM checkpoint {path} does not exist")
        m = TrmModule.load(path)
        trm[m.task] = m
    return scm, trm


def features_for(model, utts, cache_dir=""):
    feat = model.meta.get("features", {"kind": "log-mel", "dim": model.config.input_dim})
    try:
        return dataset.compute_features(utts, feat["kind"], feat["dim"], cache_dir or None)
    except (AudioFormatError, OSError) as exc:
        raise data_error("bad-audio", str(exc)) from None


def utterances_of(utts, ids):
    by_id = {u.id: u for u in utts}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise data_error("unknown-utterance", f"{len(missing)} pair ids not in manifest, e.g. {missing[0]}")
    return [by_id[i] for i in ids]


def pair_table(model, utts, splits, cache_dir=""):
    ids = sorted({i for s in splits for p in s.pairs for i in (p.anchor, p.test)})
    chosen = utterances_of(utts, ids)
    return EmbeddingTable.build(model, chosen, features_for(model, chosen, cache_dir))


def write_lines(path, lines):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- subcommands

def cmd_synth(cfg):
    try:
        scfg = synthetic.SyntheticConfig(
            n_speakers=cfg["n_speakers"], n_keywords=cfg["n_keywords"], utts_per_pair=cfg["utts_per_pair"],
            seed=cfg["seed"], noise_level=cfg["noise_level"], n_unknown_words=cfg["n_unknown_words"],
            silence_per_speaker=cfg["silence_per_speaker"], val_fraction=cfg["val_fraction"],
            test_fraction=cfg["test_fraction"])
    except ValueError as exc:
        raise config_error("bad-option", str(exc)) from None
    utts = dataset.generate_synthetic(scfg)
    if cfg["wav"]:
        wav_dir = _out(cfg, "wav")
        os.makedirs(wav_dir, exist_ok=True)
        rewritten = []
        for u in utts:
            path = os.path.join(wav_dir, u.id + ".wav")
            write_wav(path, dataset.load_waveform(u))
            rewritten.append(dataset.LabeledUtterance(u.id, os.path.abspath(path), u.keyword, u.speaker, u.split))
        utts = rewritten
    dataset.write_manifest(_out(cfg, "manifest.tsv"), utts)
    write_lines(_out(cfg, "summary.txt"), [f"{k} {v}" for k, v in dataset.summarize(utts).items()])


def cmd_ingest_gsc(cfg):
    n = cfg["silence_per_split"]
    try:
        utts = dataset.ingest_gsc(cfg["root"], tuple(_split_list(cfg["commands"])),
                                  {s: n for s in dataset.SPLITS} if n else None, cfg["seed"])
    except dataset.GscIngestError as exc:
        raise data_error("gsc-ingest", str(exc)) from None
    dataset.write_manifest(_out(cfg, "manifest.tsv"), utts)
    summary = dataset.summarize(utts)
    noise_dir = os.path.join(cfg["root"], "_background_noise_")
    n_noise = sum(f.endswith(".wav") for f in os.listdir(noise_dir)) if os.path.isdir(noise_dir) else 0
    summary.update(background_noise_files=n_noise, wav_files=summary["utterances"] + n_noise)
    write_lines(_out(cfg, "summary.txt"), [f"{k} {v}" for k, v in summary.items()])
    print(json.dumps(summary))


def cmd_pairs(cfg):
    _check_choice(cfg, "split", dataset.SPLITS)
    utts = [u for u in load_manifest(cfg["manifest"]) if u.split == cfg["split"]]
    if not utts:
        raise data_error("empty-split", f"no utterances in split {cfg['split']!r}")
    try:
        kws = dataset.make_pair_splits(utts, cfg["n_splits"], cfg["pairs_per_split"], cfg["seed"])
        sv = dataset.make_sv_splits(utts, cfg["n_splits"], cfg["sv_pairs_per_split"], cfg["seed"])
    except dataset.ProtocolError as exc:
        raise data_error("pair-protocol", str(exc)) from None
    dataset.write_pairs(_out(cfg, "pairs.tsv"), kws + sv)


def _encoder_config(cfg):
    spec = {}
    if cfg["encoder"]:
        try:
            with open(cfg["encoder"], encoding="utf-8") as fh:
                spec = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise config_error("bad-encoder", f"cannot read encoder config: {exc}") from None
    try:
        return EncoderConfig(input_dim=cfg["feature_dim"], **spec)
    except (TypeError, ValueError) as exc:
        raise config_error("bad-encoder", str(exc)) from None


def cmd_train(cfg):
    _check_choice(cfg, "feature_kind", ("log-mel", "mfcc"))
    if cfg["epochs"] < 1 or cfg["batch_size"] < 1 or cfg["lr"] <= 0 or cfg["lambda_"] < 0:
        raise config_error("bad-option", "epochs/batch size must be >= 1, lr > 0 and lambda >= 0")
    enc = _encoder_config(cfg)
    utts = load_manifest(cfg["manifest"])
    train = [u for u in utts if u.split == "train"]
    val = [u for u in utts if u.split == "validation"]
    if not train:
        raise data_error("empty-split", "manifest has no training utterances")
    try:
        dataset.check_speaker_disjoint(utts)
    except dataset.ProtocolError as exc:
        raise data_error("speaker-overlap", str(exc)) from None
    kw_classes = dataset.keyword_classes(train)
    spk_classes = dataset.speaker_classes(train)
    model = MtlModel.create(enc, kw_classes, spk_classes, cfg["seed"])
    model.meta["features"] = {"kind": cfg["feature_kind"], "dim": cfg["feature_dim"]}
    feats = features_for(model, train, cfg["cache_dir"])
    kw_t, spk_t = label_indices(train, kw_classes, spk_classes)
    validation = None
    if val:
        val = [u for u in val if u.keyword in kw_classes]
        validation = build_validation(val, features_for(model, val, cfg["cache_dir"]), kw_classes, seed=cfg["seed"])
    result = train_mtl(model, feats, kw_t, spk_t, epochs=cfg["epochs"], seed=cfg["seed"], lam=cfg["lambda_"],
                       batch_size=cfg["batch_size"], lr=cfg["lr"], validation=validation)
    result.model.save(_out(cfg, "model.ckpt"), {"best_epoch": result.best_epoch})
    _write_history(_out(cfg, "history.tsv"), result.history)


def _write_history(path, history):
    keys = sorted({k for h in history for k in h} - {"epoch"})
    lines = ["# epoch\t" + "\t".join(keys)]
    for h in history:
        lines.append("\t".join([str(h["epoch"])] + [repr(float(h[k])) if k in h else "nan" for k in keys]))
    write_lines(path, lines)


def _validation_split(cfg, splits):
    for s in splits:
        if s.split_id == cfg["split_id"]:
            return s
    raise config_error("bad-option", f"pair file has no keyword split {cfg['split_id']}")


def cmd_tune_scm(cfg):
    _check_choice(cfg, "task", ("TB", "TO"))
    if not 0 <= cfg["target_far"] <= 1 or not 0 < cfg["grid_step"] <= 1:
        raise config_error("bad-option", "target FAR must lie in [0, 1] and grid step in (0, 1]")
    model = load_model(cfg["model"])
    utts = load_manifest(cfg["manifest"])
    kws, _ = load_pairs(cfg["pairs"])
    split = _validation_split(cfg, kws)
    table = pair_table(model, utts, [split], cfg["cache_dir"])
    try:
        params = tune_scm(PkMtlSystem(model), table, split, cfg["task"], cfg["target_far"], cfg["grid_step"])
    except dataset.ProtocolError as exc:
        raise data_error("pair-protocol", str(exc)) from None
    with open(_out(cfg, f"scm-{cfg['task']}.txt"), "w", encoding="utf-8") as fh:
        fh.write(params.to_text())


def cmd_adapt_trm(cfg):
    _check_choice(cfg, "task", ("TB", "TO"))
    _check_choice(cfg, "gate", ("per-dim", "per-embedding"))
    if cfg["epochs"] < 1 or cfg["lr"] <= 0:
        raise config_error("bad-option", "epochs must be >= 1 and lr > 0")
    model = load_model(cfg["model"])
    utts = load_manifest(cfg["manifest"])
    train = [u for u in utts if u.split == "train"]
    feats = features_for(model, train, cfg["cache_dir"])
    validation = None
    system = PkMtlSystem(model)
    if cfg["pairs"]:
        kws, _ = load_pairs(cfg["pairs"])
        split = _validation_split(cfg, kws)
        validation = validation_eer_fn(system, pair_table(model, utts, [split], cfg["cache_dir"]), split, cfg["task"])
    module = TrmModule(cfg["task"], model.config.embed_dim, gate=cfg["gate"], seed=cfg["seed"])
    try:
        result = train_trm(module, model, train, feats, epochs=cfg["epochs"], seed=cfg["seed"],
                           batch_n=cfg["batch_n"] or None, lr=cfg["lr"], group_fraction=cfg["group_fraction"],
                           validation=validation)
    except dataset.ProtocolError as exc:
        raise data_error("trm-batches", str(exc)) from None
    result.module.save(_out(cfg, f"trm-{cfg['task']}.ckpt"))
    _write_history(_out(cfg, f"trm-{cfg['task']}-history.tsv"), result.history)


def cmd_enroll(cfg):
    _check_choice(cfg, "split", dataset.SPLITS)
    if cfg["per_speaker"] < 1:
        raise config_error("bad-option", "--per-speaker must be >= 1")
    model = load_model(cfg["model"])
    utts = sorted((u for u in load_manifest(cfg["manifest"])
                   if u.split == cfg["split"] and u.speaker != dataset.NO_SPEAKER), key=lambda u: u.id)
    chosen = {}
    for u in utts:
        chosen.setdefault(u.speaker, [])
        if len(chosen[u.speaker]) < cfg["per_speaker"]:
            chosen[u.speaker].append(u)
    if not chosen:
        raise data_error("empty-split", f"no speakers in split {cfg['split']!r}")
    arrays = {}
    for spk, us in sorted(chosen.items()):
        _, zs = embed_batch(model, features_for(model, us, cfg["cache_dir"]))
        arrays[spk] = enrollment_embedding(zs)
    ad.save_checkpoint(_out(cfg, "enrollments.ckpt"), arrays,
                       {"kind": "enrollments", "per_speaker": cfg["per_speaker"],
                        "utterances": {s: [u.id for u in us] for s, us in sorted(chosen.items())}})


def load_enrollments(path):
    if not os.path.exists(path):
        raise config_error("missing-checkpoint", f"enrolment file {path} does not exist")
    arrays, meta = ad.load_checkpoint(path)
    if meta.get("kind") != "enrollments":
        raise data_error("bad-checkpoint", f"{path} is not an enrolment file")
    return arrays


def _param_counts(system):
    base = system.model.n_params()["total"]
    trm = sum(v.data.size for m in system.trm.values() for v in m.params.values())
    return {"keyword-only": base, "SCM-M": base, "SCM-GS": base, "TRM": base + trm}


def cmd_eval(cfg):
    model = load_model(cfg["model"])
    scm, trm = load_adapters(cfg)
    system = PkMtlSystem(model, scm, trm)
    utts = load_manifest(cfg["manifest"])
    kws, sv = load_pairs(cfg["pairs"])
    if not kws:
        raise data_error("bad-pairs", "pair file holds no keyword pair splits")
    table = pair_table(model, utts, kws + sv, cfg["cache_dir"])
    enrollments = load_enrollments(cfg["enrollments"]) if cfg["enrollments"] else None
    try:
        lines, results = _table1(system, table, kws, sv, enrollments)
    except dataset.ProtocolError as exc:
        raise data_error("pair-protocol", str(exc)) from None
    write_lines(_out(cfg, "report.txt"), lines)
    # score distributions of the first split, per category, for each TO mechanism
    split = kws[0]
    for row, mech, alpha in evaluation.MECHANISM_ROWS:
        if row not in results or "TO" not in results[row]:
            continue
        by_cat = {c: system.score_pairs(table, split.by_category(c), "TO", mech, alpha, enrollments)
                  for c in dataset.CATEGORIES}
        write_histograms(_out(cfg, f"hist-{row.lower()}.tsv"), by_cat)
        pos, neg = dataset.task_partition(split, "TO")
        write_det_curve(_out(cfg, f"det-to-{row.lower()}.tsv"),
                        ScoreSet(system.score_pairs(table, pos, "TO", mech, alpha, enrollments),
                                 system.score_pairs(table, neg, "TO", mech, alpha, enrollments)))


def _table1(system, table, kws, sv, enrollments):
    if enrollments is None:
        return evaluation.table1_report(system, table, kws, sv, _param_counts(system))
    missing = sorted({s for s in table.speaker if s and s not in enrollments})
    if missing:
        raise data_error("missing-enrollment", f"no enrolment for speaker(s) {', '.join(missing[:5])}")
    return evaluation.table1_report(system, table, kws, sv, _param_counts(system), enrollments)


def stream_features(model, cfg, words):
    if cfg["stream"]:
        if not os.path.exists(cfg["stream"]):
            raise data_error("missing-stream", f"stream file {cfg['stream']} does not exist")
        try:
            wav = read_wav(cfg["stream"])
        except AudioFormatError as exc:
            raise data_error("bad-audio", str(exc)) from None
    else:
        wav, _ = synthetic.synthetic_stream(cfg["stream_seed"], cfg["stream_segments"], words,
                                            n_speakers=cfg["stream_speakers"], silence_every=10)
    feat = model.meta.get("features", {"kind": "log-mel", "dim": model.config.input_dim})
    segments = segment_stream(wav)
    if not segments:
        raise data_error("empty-stream", "stream is shorter than one segment")
    return np.stack([extract(s, feat["kind"], dim=feat["dim"]).frames for s in segments])


def _stream_words(model):
    """Word indices of the model's command words plus two non-command words."""
    words = [synthetic.COMMAND_WORDS.index(k) for k in model.keyword_classes if k in synthetic.COMMAND_WORDS]
    return words + [synthetic.UNKNOWN_OFFSET, synthetic.UNKNOWN_OFFSET + 1]


def cmd_eval_stream(cfg):
    model = load_model(cfg["model"])
    scm, trm = load_adapters(cfg)
    system = PkMtlSystem(model, scm, trm)
    utts = load_manifest(cfg["manifest"])
    kws, _ = load_pairs(cfg["pairs"])
    if not kws:
        raise data_error("bad-pairs", "pair file holds no keyword pair splits")
    table = pair_table(model, utts, kws, cfg["cache_dir"])
    seg = embed_batch(model, stream_features(model, cfg, _stream_words(model)))
    results = {"keyword-only": evaluation.evaluate_stream(system, table, seg, kws, "C", "keyword-only",
                                                          seed=cfg["seed"])}
    for task in ("TB", "TO"):
        if task in scm:
            results[f"{task}-SCM"] = evaluation.evaluate_stream(system, table, seg, kws, task, "scm", seed=cfg["seed"])
        if task in trm:
            results[f"{task}-TRM"] = evaluation.evaluate_stream(system, table, seg, kws, task, "trm", seed=cfg["seed"])
    lines = evaluation.table2_report(results)
    lines.append(f"stream.segments {len(seg[0])}")
    write_lines(_out(cfg, "stream-report.txt"), lines)


def cmd_model_info(cfg):
    model = load_model(cfg["model"])
    _, trm = load_adapters({"trm": cfg["trm"]})
    lines = [f"mtl.{k} {v}" for k, v in model.n_params().items()]
    for task, m in sorted(trm.items()):
        lines.append(f"trm-{task.lower()}.total {sum(v.data.size for v in m.params.values())}")
    print("\n".join(lines))
    if cfg.get("out"):
        write_lines(_out(cfg, "model-info.txt"), lines)


COMMANDS = {
    "synth": cmd_synth, "ingest-gsc": cmd_ingest_gsc, "pairs": cmd_pairs, "train": cmd_train,
    "tune-scm": cmd_tune_scm, "adapt-trm": cmd_adapt_trm, "enroll": cmd_enroll, "eval": cmd_eval,
    "eval-stream": cmd_eval_stream, "model-info": cmd_model_info,
}


def _report_error(code, kind, message):
    print(json.dumps({"error": kind, "exit_code": code, "message": message}), file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        write_run_config(cfg)
        COMMANDS[args.command](cfg)
    except CliError as exc:
        return _report_error(exc.code, exc.kind, str(exc))
    except (TrainingDiverged, ad.NonFiniteGradientError, FloatingPointError) as exc:
        return _report_error(EXIT_NUMERIC, "numerical-failure", str(exc))
    except (dataset.ProtocolError, AudioFormatError) as exc:
        return _report_error(EXIT_DATA, "data", str(exc))
    except ValueError as exc:
        return _report_error(EXIT_CONFIG, "invalid-value", str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
