"""``songvae`` command line: preprocess, train, generate, evaluate, inspect-latent.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import dataset, hcgan, hcvae, lcvae, metrics, synth
from .checkpoint import load_checkpoint
from .config import RunConfig, desk_config, parse_config
from .corpus import SONG_PHRASES, SONG_STEPS, export_midi, load_song_grid, preprocess_file, split_phrases
from .errors import MissingPretrainError, NoInputError, ProvenanceError, RangeError, SongVAEError, UsageError
from .fln import FLNClassDictionary, format_label_sequences, parse_label_sequences
from .training import TSVLog, init_seed

log = logging.getLogger("songvae")

TASKS = ("lcvae", "hcvae", "hcgan", "flnseq")
FLN_SOURCES = ("file", "model", "dataset-sample")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(UsageError.exit_code, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# helpers


def run_config(args) -> RunConfig:
    """Defaults (or the desk preset), then the config file, then ``--set``, then ``--seed``."""
    cfg = desk_config() if getattr(args, "desk", False) else RunConfig()
    if getattr(args, "config", None):
        cfg = parse_config(Path(args.config).read_text(), cfg)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value)
    return cfg.with_seed(getattr(args, "seed", None))


def _require_seed(cfg: RunConfig) -> int:
    if cfg.seed is None:
        raise UsageError("a seed is required (--seed or 'seed = N' in the config file)")
    return cfg.seed


def _check_dictionary(expected: FLNClassDictionary, actual: FLNClassDictionary, what: str) -> None:
    if expected.digest() != actual.digest():
        raise ProvenanceError(f"{what} was built with a different FLN dictionary")


def _open_log(path: Path, keep_rows: int) -> TSVLog:
    """Training log that keeps the first ``keep_rows`` lines (those covered by the checkpoint)."""
    lines = path.read_text().splitlines(keepends=True)[:keep_rows] if path.exists() and keep_rows else []
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(lines))
    return TSVLog(path)


def _saver(every: int, last: int, save):
    def on_progress(i, *state):
        log.info("step %d/%d", i, last)
        if i % every == 0 or i == last:
            save(i, *state)
    return on_progress


# --------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    cfg = run_config(args)
    result = dataset.preprocess_directory(args.midi_dir, cfg.min_count)
    dataset.write_prepared(result, args.out_dir)
    c = result.corpus
    print(f"files={result.n_files} rejected={len(result.rejects)} phrases={len(c.phrases)} "
          f"songs={len(c.songs)} too_short={len(result.too_short)} K={c.dictionary.K}")
    for name, msg in result.rejects:
        print(f"error\t{name}\t{msg}", file=sys.stderr)
    return 2 if result.rejects else 0


def _train_lcvae(args, cfg: RunConfig, out: Path, log_path: Path) -> None:
    data = dataset.load_prepared(args.data)
    tcfg, model, opt, start = cfg.lcvae, None, None, 0
    if args.resume and out.exists():
        model, tcfg, dictionary, ckpt, opt = lcvae.load_lcvae(out, with_optimizer=True)
        _check_dictionary(data.dictionary, dictionary, str(out))
        tcfg.epochs, start = cfg.lcvae.epochs, ckpt.meta["epoch"]
    else:
        init_seed(tcfg.seed)
    tsv = _open_log(log_path, start)
    save = lambda e, m, o: lcvae.save_lcvae(out, m, tcfg, data.dictionary, o, e)  # noqa: E731
    lcvae.train_lcvae(data.phrases, data.phrase_labels, data.dictionary.n_classes, tcfg, tsv,
                      _saver(args.save_every or 1, tcfg.epochs, save), model, opt, start)


def _train_hcvae(args, cfg: RunConfig, out: Path, log_path: Path) -> None:
    if not args.lcvae:
        raise MissingPretrainError("train hcvae needs a trained L-CVAE checkpoint (--lcvae)")
    data = dataset.load_prepared(args.data)
    if len(data.songs) == 0:
        raise NoInputError("the prepared corpus has no 17-phrase songs")
    tcfg, opt, start = cfg.gvae, None, 0
    if args.resume and out.exists():
        model, tcfg, dictionary, ckpt, opt = hcvae.load_hcvae(out, args.lcvae, with_optimizer=True)
        tcfg.epochs, start = cfg.gvae.epochs, ckpt.meta["epoch"]
    else:
        local, _, dictionary, _ = lcvae.load_lcvae(args.lcvae)
        init_seed(tcfg.seed)
        model = hcvae.HCVAE.from_config(local, tcfg)
    _check_dictionary(data.dictionary, dictionary, args.lcvae)
    tsv = _open_log(log_path, start)
    save = lambda e, m, o: hcvae.save_hcvae(out, m, tcfg, args.lcvae, o, e)  # noqa: E731
    hcvae.train_hcvae(model, data.songs, data.song_labels, tcfg, tsv,
                      _saver(args.save_every or 1, tcfg.epochs, save), opt, start)


def _train_hcgan(args, cfg: RunConfig, out: Path, log_path: Path) -> None:
    if not args.hcvae:
        raise MissingPretrainError("train hcgan needs a trained HCVAE checkpoint (--hcvae)")
    data = dataset.load_prepared(args.data)
    if len(data.songs) == 0:
        raise NoInputError("the prepared corpus has no 17-phrase songs")
    base, _, dictionary, _ = hcvae.load_hcvae(args.hcvae, args.lcvae)
    _check_dictionary(data.dictionary, dictionary, args.hcvae)
    tcfg, gen, critic, opts, start = cfg.gan, None, None, None, 0
    if args.resume and out.exists():
        gen, critic, tcfg, _, _, ckpt, opts = hcgan.load_hcgan(out, args.hcvae, args.lcvae, with_optimizer=True)
        tcfg.steps, start = cfg.gan.steps, ckpt.meta["step"]
    tsv = _open_log(log_path, start)
    save = lambda s, g, c, o: hcgan.save_hcgan(out, g, c, tcfg, args.hcvae, o, s)  # noqa: E731
    hcgan.train_hcgan(base, data.songs, data.song_labels, tcfg, tsv, gen, critic, opts, start,
                      _saver(args.save_every or 50, tcfg.steps, save))


def _train_flnseq(args, cfg: RunConfig, out: Path, log_path: Path) -> None:
    data = dataset.load_prepared(args.data)
    if len(data.song_labels) == 0:
        raise NoInputError("the prepared corpus has no 17-phrase songs")
    tsv = _open_log(log_path, 0)
    model = hcvae.train_fln_seq_vae(data.song_labels, data.dictionary.n_classes, cfg.flnseq, tsv)
    hcvae.save_fln_seq(out, model, cfg.flnseq, data.dictionary.digest())


def cmd_train(args) -> int:
    cfg = run_config(args)
    _require_seed(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = Path(args.log) if args.log else out.with_name(out.name + ".log.tsv")
    {"lcvae": _train_lcvae, "hcvae": _train_hcvae, "hcgan": _train_hcgan, "flnseq": _train_flnseq}[args.task](
        args, cfg, out, log_path
    )
    print(f"wrote {out}")
    return 0


def load_generator(path, lcvae_path=None, hcvae_path=None):
    """HCVAE or HCGAN checkpoint to ``(model, gvae_cfg, dictionary)``."""
    kind = load_checkpoint(path).kind
    if kind == hcvae.KIND:
        model, gcfg, dictionary, _ = hcvae.load_hcvae(path, lcvae_path)
    elif kind == hcgan.KIND:
        model, _, gan_cfg, gcfg, dictionary, _ = hcgan.load_hcgan(path, hcvae_path, lcvae_path)
        gcfg.local_eps_var = gan_cfg.local_eps_var
    else:
        raise UsageError(f"{path} is a {kind!r} checkpoint; generation needs hcvae or hcgan")
    return model, gcfg, dictionary


def label_sequences(args, n: int, dictionary: FLNClassDictionary, g: torch.Generator) -> np.ndarray:
    if args.fln_source == "file":
        if not args.fln_file:
            raise UsageError("--fln-source file needs --fln-file")
        seqs = parse_label_sequences(Path(args.fln_file).read_text(), dictionary.n_classes)
        if not seqs:
            raise RangeError(f"{args.fln_file} holds no label sequences")
        return np.array([seqs[i % len(seqs)] for i in range(n)], dtype=np.int64)
    if args.fln_source == "model":
        if not args.fln_model:
            raise UsageError("--fln-source model needs --fln-model")
        model, _, meta = hcvae.load_fln_seq(args.fln_model)
        if meta.get("dictionary_digest") != dictionary.digest():
            raise ProvenanceError(f"{args.fln_model} was trained with a different FLN dictionary")
        return hcvae.sample_fln_sequences(model, n, g)
    if not args.data:
        raise UsageError("--fln-source dataset-sample needs --data")
    data = dataset.load_prepared(args.data)
    _check_dictionary(dictionary, data.dictionary, args.data)
    if len(data.song_labels) == 0:
        raise NoInputError("the prepared corpus has no songs to sample labels from")
    idx = torch.randint(len(data.song_labels), (n,), generator=g).numpy()
    return data.song_labels[idx]


def cmd_generate(args) -> int:
    cfg = run_config(args)
    seed = _require_seed(cfg)
    if args.n < 1:
        raise UsageError("-n must be at least 1")
    model, gcfg, dictionary = load_generator(args.checkpoint, args.lcvae, args.hcvae)
    g = torch.Generator().manual_seed(seed)
    labels = label_sequences(args, args.n, dictionary, g)
    songs = hcvae.generate_songs(model, labels, gcfg, g)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, song in enumerate(songs):
        stem = out / f"song_{i:03d}"
        export_midi(song, stem.with_suffix(".mid"))
        stem.with_suffix(".fln").write_text(format_label_sequences([song.labels]))
    print(f"wrote {len(songs)} songs to {out}")
    return 0


def _source_grids(src: Path, normalize: bool):
    """Song grids plus, when ``.fln`` sidecars exist for every file, their label sequences."""
    if (src / dataset.SONGS).exists():
        songs = dataset.load_prepared(src).songs
        return [s.reshape(SONG_STEPS, -1) for s in songs], None
    files = dataset.midi_files(src)
    grids = [load_song_grid(p, SONG_STEPS, normalize) for p in files]
    sidecars = [p.with_suffix(".fln") for p in files]
    if files and all(s.exists() for s in sidecars):
        labels = [parse_label_sequences(s.read_text())[0] for s in sidecars]
        return grids, labels
    return grids, None


def cmd_evaluate(args) -> int:
    cfg = run_config(args).metrics
    dictionary = FLNClassDictionary.load(args.dictionary) if args.dictionary else None
    rows: dict[str, metrics.MetricsReport] = {}
    for i, src in enumerate(Path(s) for s in args.sources):
        if not src.exists():
            raise NoInputError(f"{src} does not exist")
        grids, labels = _source_grids(src, args.normalize)
        fln_phrases = fln_labels = None
        if labels is not None and dictionary is not None:
            fln_phrases = [p for g in grids for p in split_phrases(g)[:SONG_PHRASES]]
            fln_labels = [x for seq in labels for x in seq]
        name = src.name or f"source{i}"
        if name in rows:
            name = f"{name}_{i}"
        rows[name] = metrics.evaluate(grids, cfg.bar_steps, cfg.qn_min_steps, cfg.upc_include_empty,
                                      fln_phrases, fln_labels, dictionary)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = metrics.format_table(rows)
    (out / "report.txt").write_text(table)
    for name, report in rows.items():
        (out / f"{name}.kv").write_text(report.to_kv())
    print(table, end="")
    return 0


def _repeated_pairs(phrases) -> list[tuple[int, int]]:
    pairs = []
    for i in range(len(phrases)):
        for j in range(i + 1, len(phrases)):
            if phrases[i].any() and np.array_equal(phrases[i], phrases[j]):
                pairs.append((i, j))
    return pairs


def cmd_inspect_latent(args) -> int:
    model, _, dictionary, _ = lcvae.load_lcvae(args.lcvae)
    if args.midi:
        phrases = split_phrases(preprocess_file(args.midi))
    elif args.data is not None:
        data = dataset.load_prepared(args.data)
        if not 0 <= args.song < len(data.songs):
            raise RangeError(f"song index {args.song} outside 0..{len(data.songs) - 1}")
        phrases = list(data.songs[args.song])
    else:
        raise UsageError("give --midi or --data with --song")
    if args.phrases:
        i, j = args.phrases
        if not (0 <= i < len(phrases) and 0 <= j < len(phrases)):
            raise RangeError(f"phrase index outside 0..{len(phrases) - 1}")
        pairs = [(i, j)]
    else:
        pairs = _repeated_pairs(phrases)
        if not pairs:
            raise NoInputError("no repeated non-empty phrases to compare")
    worst = 0.0
    for i, j in pairs:
        report = metrics.latent_diff(phrases[i], phrases[j], model, dictionary)
        worst = max(worst, report.max)
        print(f"{i}\t{j}\t{report.summary()}")
    print(f"overall_max={worst:.6g}")
    return 0


def cmd_synth_corpus(args) -> int:
    paths = synth.write_corpus(args.out_dir, args.songs, args.seed, args.short)
    print(f"wrote {len(paths)} MIDI files to {args.out_dir}")
    return 0


# --------------------------------------------------------------------------
# parser


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'section.key = value' config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--desk", action="store_true", help="start from the reduced single-CPU preset")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="songvae", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", help="MIDI directory to phrase/song stores and FLN dictionary")
    p.add_argument("midi_dir")
    p.add_argument("out_dir")
    _config_args(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="run one training task")
    p.add_argument("task", choices=TASKS)
    p.add_argument("--data", required=True, help="prepared corpus directory")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--seed", type=int)
    p.add_argument("--lcvae", help="L-CVAE checkpoint (hcvae; optional override for hcgan)")
    p.add_argument("--hcvae", help="HCVAE checkpoint (hcgan)")
    p.add_argument("--log", help="training log path (default: <out>.log.tsv)")
    p.add_argument("--resume", action="store_true", help="continue from --out if it exists")
    p.add_argument("--save-every", type=int, help="checkpoint interval in epochs/steps")
    _config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="write songs from an HCVAE or HCGAN checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fln-source", choices=FLN_SOURCES, required=True)
    p.add_argument("--fln-file", help="label sequences, 17 per line")
    p.add_argument("--fln-model", help="FLN-sequence VAE checkpoint")
    p.add_argument("--data", help="prepared corpus (dataset-sample)")
    p.add_argument("-n", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--lcvae", help="override the L-CVAE parent location")
    p.add_argument("--hcvae", help="override the HCVAE parent location")
    _config_args(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="EB/UPC/QN/IT (and FLN accuracy) report")
    p.add_argument("sources", nargs="+", help="prepared corpus or directory of MIDI files")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--dictionary", help="FLN dictionary for accuracy on generated songs")
    p.add_argument("--normalize", action="store_true", help="key/tempo-normalize raw MIDI inputs")
    _config_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect-latent", help="compare class-mean-subtracted latents of phrases")
    p.add_argument("--lcvae", required=True)
    p.add_argument("--midi")
    p.add_argument("--data")
    p.add_argument("--song", type=int, default=0)
    p.add_argument("--phrases", type=int, nargs=2, metavar=("I", "J"))
    p.set_defaults(func=cmd_inspect_latent)

    p = sub.add_parser("synth-corpus", help="write the deterministic synthetic corpus")
    p.add_argument("out_dir")
    p.add_argument("--songs", type=int, default=50)
    p.add_argument("--short", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_corpus)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except SongVAEError as exc:
        print(f"songvae: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"songvae: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
