"""Command-line pipeline driver.

Subcommands cover the full workflow: counts -> whiten -> subspace ID ->
moment-driven EM -> steady state -> embeddings / RNN export, plus the
synthetic data generators.  Logs are line-delimited JSON records; every
artifact file is versioned and self-describing.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from textlds import corpus as corpus_mod
from textlds import em as em_mod
from textlds import inference as inf_mod
from textlds import model as model_mod
from textlds import ssid as ssid_mod
from textlds import steady as steady_mod
from textlds import synth as synth_mod

log = logging.getLogger("textlds")


class _JsonLineFormatter(logging.Formatter):
    def format(self, record):
        payload = {
            "ts": round(record.created, 3),
            "level": record.levelname.lower(),
            "msg": record.getMessage(),
        }
        if hasattr(record, "stage"):
            payload["stage"] = record.stage
        return json.dumps(payload, sort_keys=True)


def _setup_logging(verbose=True):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonLineFormatter())
    log.handlers[:] = [handler]
    log.setLevel(logging.INFO if verbose else logging.WARNING)


def _stage(name, **extra):
    log.info("stage %s %s", name, json.dumps(extra, sort_keys=True) if extra else "",
             extra={"stage": name})


def _file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class PipelineConfig:
    """Validated configuration for the end-to-end pipeline."""

    input: str
    outdir: str
    max_types: int = 200_000
    max_lag: int = None
    pseudo: float = 1000.0
    h: int = ssid_mod.H_DEFAULT
    r_ssid: int = ssid_mod.R_SSID_DEFAULT
    r_em: int = ssid_mod.R_EM_DEFAULT
    em_iters: int = em_mod.EM_MAX_ITERS_DEFAULT
    em_mode: str = "asos"
    seed: int = 0
    write_embeddings: bool = False
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.max_lag is None:
            self.max_lag = max(2 * self.r_ssid - 1, self.r_em)
        self.validate()

    def validate(self):
        if self.h < 1:
            raise ValueError("h must be at least 1")
        if self.r_em < 1:
            raise ValueError("r_em must be at least 1")
        if self.max_lag < 2 * self.r_ssid - 1:
            raise ValueError(
                f"max_lag={self.max_lag} too small: the Hankel matrix needs "
                f"lags up to 2*r_ssid-1={2 * self.r_ssid - 1}"
            )
        if self.max_lag < self.r_em:
            raise ValueError("max_lag must cover the EM horizon r_em")
        if self.em_mode not in ("asos", "exact"):
            raise ValueError(f"unknown EM mode {self.em_mode!r}")


TEST_PROFILE = {"h": 5, "r_ssid": 3, "r_em": 3, "max_types": 1000, "pseudo": 1.0}


def _cmd_counts(args):
    sentences = corpus_mod.read_sentences(args.input)
    vocab = corpus_mod.build_vocab(sentences, args.max_types)
    stats = corpus_mod.accumulate_counts(
        corpus_mod.read_sentences(args.input), vocab, args.max_lag
    )
    if args.pseudo > 0:
        stats = corpus_mod.apply_pseudocounts(stats, args.pseudo)
    corpus_mod.save_counts(stats, args.out)
    _stage("counts", V=stats.V, T=stats.T, K_max=stats.K_max, out=args.out)
    return 0


def _cmd_train_ssid(args):
    stats = corpus_mod.load_counts(args.counts)
    params = ssid_mod.ssid_pipeline(stats, args.h, r=args.r, seed=args.seed)
    params.meta["corpus_hash"] = _file_sha256(args.counts)
    params.meta["seed"] = args.seed
    model_mod.save_model(params, args.out)
    _stage("train-ssid", h=args.h, r=args.r, out=args.out)
    return 0


def _cmd_train_em(args):
    stats = corpus_mod.load_counts(args.counts)
    init = model_mod.load_model(args.init)
    sentences = None
    if args.mode == "exact":
        if not args.corpus:
            raise SystemExit("exact mode needs --corpus")
        vocab = stats.vocab
        sentences = [
            vocab.encode_sentence(s) for s in corpus_mod.read_sentences(args.corpus)
        ]
    params, trace = em_mod.em_run(
        init,
        args.mode,
        stats=stats,
        sentences=sentences,
        r=args.r,
        max_iters=args.iters,
    )
    params.meta.update(init.meta)
    params.meta["r"] = args.r
    model_mod.save_model(params, args.out)
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as f:
            for rec in trace.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
    if trace.aborted:
        log.warning("EM aborted: %s", trace.aborted)
    _stage("train-em", mode=args.mode, iters=len(trace.records) - 1, out=args.out)
    return 0


def _cmd_eval_ll(args):
    params = model_mod.load_model(args.model)
    stats = corpus_mod.load_counts(args.counts)
    steady = steady_mod.compute_steady_state(params)
    if args.corpus:
        sentences = [
            stats.vocab.encode_sentence(s)
            for s in corpus_mod.read_sentences(args.corpus)
        ]
        ll = steady_mod.steady_log_likelihood(params, steady, sentences)
    else:
        ll = steady_mod.steady_log_likelihood(params, steady, stats)
    print(f"total_ll {ll.total:.6f}")
    print(f"per_token_ll {ll.per_token:.6f}")
    return 0


def _load_model_and_vocab(model_path, counts_path):
    params = model_mod.load_model(model_path)
    stats = corpus_mod.load_counts(counts_path)
    if stats.V != params.V:
        raise SystemExit("model and counts vocabulary sizes differ")
    return params, stats


def _cmd_embed(args):
    params, stats = _load_model_and_vocab(args.model, args.counts)
    steady = steady_mod.compute_steady_state(params)
    psis, _ = corpus_mod.whiten_stats(stats, max_lag=min(stats.K_max, 7))
    moments = em_mod.asos_estep(params, steady, psis)
    context = inf_mod.EmbeddingContext.from_posterior_covariance(moments.Exx)
    sentences = list(corpus_mod.read_sentences(args.corpus))
    encoded = [stats.vocab.encode_sentence(s) for s in sentences]
    embeddings = inf_mod.embed_corpus(steady, context, encoded)
    h = params.h
    with open(args.out, "w", encoding="utf-8") as f:
        f.write(f"# textlds embeddings v1 mode={args.mode} h={h}\n")
        rows = []
        for s_idx, (tokens, emb) in enumerate(zip(sentences, embeddings)):
            mat = getattr(emb, args.mode)
            rows.append(mat)
            for pos, token in enumerate(tokens):
                vec = " ".join(f"{x:.10g}" for x in mat[pos])
                f.write(f"{token}\t{s_idx}\t{pos}\t{vec}\n")
    if args.binary_out:
        np.savez(
            args.binary_out,
            mode=args.mode,
            sentence_index=np.concatenate(
                [np.full(len(s), i) for i, s in enumerate(sentences)]
            ),
            vectors=np.vstack(rows),
        )
    _stage("embed", sentences=len(sentences), out=args.out)
    return 0


def _cmd_export_rnn(args):
    params = model_mod.load_model(args.model)
    steady = steady_mod.compute_steady_state(params)
    init = inf_mod.export_rnn_init(params, steady)
    inf_mod.save_rnn_init(init, args.out)
    _stage("export-rnn", out=args.out)
    return 0


def _cmd_analyze_transitions(args):
    params, stats = _load_model_and_vocab(args.model, args.counts)
    pairs = inf_mod.transition_singular_pairs(params, stats.vocab, top_n=args.top)
    for i, pair in enumerate(pairs):
        right = " ".join(pair.right_words)
        left = " ".join(pair.left_words)
        print(f"{i}\tsigma={pair.singular_value:.6f}\t{right}\t->\t{left}")
    return 0


def _cmd_synth(args):
    if args.kind == "hmm":
        sentences, _, _, _ = synth_mod.sample_hmm_text(
            args.states, args.V, args.T, args.seed, sentence_len=args.sentence_len
        )
        with open(args.out, "w", encoding="utf-8") as f:
            for sent in sentences:
                f.write(" ".join(f"w{int(i):03d}" for i in sent) + "\n")
    else:
        system = synth_mod.random_ground_truth(args.h, args.V, args.seed)
        W, X = synth_mod.sample_lds(system, args.T)
        np.savez(
            args.out,
            observations=W,
            states=X,
            A=system.A,
            C=system.C,
            D_core=system.D_core,
            u=system.u,
        )
    _stage("synth", kind=args.kind, T=args.T, out=args.out)
    return 0


def run_pipeline(config):
    """Execute the full learning workflow; returns artifact paths.

    Stages run in order (counts, ssid, em, steady, export); a failure names
    its stage and leaves earlier artifacts in place.
    """
    import os

    os.makedirs(config.outdir, exist_ok=True)
    paths = {
        "counts": os.path.join(config.outdir, "counts.bin"),
        "model_ssid": os.path.join(config.outdir, "model_ssid.bin"),
        "model": os.path.join(config.outdir, "model.bin"),
        "trace": os.path.join(config.outdir, "trace.jsonl"),
        "rnn": os.path.join(config.outdir, "rnn_init.bin"),
        "embeddings": os.path.join(config.outdir, "embeddings.txt"),
    }
    stage = "counts"
    try:
        t0 = time.perf_counter()
        sentences = corpus_mod.read_sentences(config.input)
        vocab = corpus_mod.build_vocab(sentences, config.max_types)
        stats = corpus_mod.accumulate_counts(
            corpus_mod.read_sentences(config.input), vocab, config.max_lag
        )
        if config.pseudo > 0:
            stats = corpus_mod.apply_pseudocounts(stats, config.pseudo)
        corpus_mod.save_counts(stats, paths["counts"])
        _stage(stage, seconds=round(time.perf_counter() - t0, 3), V=stats.V, T=stats.T)

        stage = "train-ssid"
        t0 = time.perf_counter()
        params = ssid_mod.ssid_pipeline(stats, config.h, r=config.r_ssid, seed=config.seed)
        params.meta["corpus_hash"] = _file_sha256(paths["counts"])
        params.meta["seed"] = config.seed
        model_mod.save_model(params, paths["model_ssid"])
        _stage(stage, seconds=round(time.perf_counter() - t0, 3))

        stage = "train-em"
        t0 = time.perf_counter()
        em_sentences = None
        if config.em_mode == "exact":
            em_sentences = [
                vocab.encode_sentence(s)
                for s in corpus_mod.read_sentences(config.input)
            ]
        final, trace = em_mod.em_run(
            params,
            config.em_mode,
            stats=stats,
            sentences=em_sentences,
            r=config.r_em,
            max_iters=config.em_iters,
        )
        final.meta.update(params.meta)
        final.meta["r"] = config.r_em
        model_mod.save_model(final, paths["model"])
        with open(paths["trace"], "w", encoding="utf-8") as f:
            for rec in trace.records:
                f.write(json.dumps(rec, sort_keys=True) + "\n")
        if trace.aborted:
            raise RuntimeError(f"EM aborted: {trace.aborted}")
        _stage(stage, seconds=round(time.perf_counter() - t0, 3),
               iters=len(trace.records) - 1)

        stage = "steady-state"
        t0 = time.perf_counter()
        steady = steady_mod.compute_steady_state(final)
        ll = steady_mod.steady_log_likelihood(final, steady, stats)
        _stage(stage, seconds=round(time.perf_counter() - t0, 3),
               per_token_ll=round(ll.per_token, 6))

        stage = "export"
        inf_mod.save_rnn_init(inf_mod.export_rnn_init(final, steady), paths["rnn"])
        if config.write_embeddings:
            psis, _ = corpus_mod.whiten_stats(stats, max_lag=config.r_em)
            moments = em_mod.asos_estep(final, steady, psis)
            context = inf_mod.EmbeddingContext.from_posterior_covariance(moments.Exx)
            raw = list(corpus_mod.read_sentences(config.input))
            encoded = [vocab.encode_sentence(s) for s in raw]
            embeddings = inf_mod.embed_corpus(steady, context, encoded)
            with open(paths["embeddings"], "w", encoding="utf-8") as f:
                f.write(f"# textlds embeddings v1 mode=normalized h={config.h}\n")
                for s_idx, (tokens, emb) in enumerate(zip(raw, embeddings)):
                    for pos, token in enumerate(tokens):
                        vec = " ".join(f"{x:.10g}" for x in emb.normalized[pos])
                        f.write(f"{token}\t{s_idx}\t{pos}\t{vec}\n")
        _stage(stage)
        final.validate()
        return paths
    except Exception as exc:
        raise RuntimeError(f"pipeline stage {stage!r} failed: {exc}") from exc


def _cmd_pipeline(args):
    overrides = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            overrides.update(json.load(f))
    if args.profile == "test":
        for key, value in TEST_PROFILE.items():
            overrides.setdefault(key, value)
    cli_fields = (
        "max_types", "max_lag", "pseudo", "h", "r_ssid", "r_em",
        "em_iters", "em_mode", "seed",
    )
    for name in cli_fields:
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    config = PipelineConfig(
        input=args.input,
        outdir=args.outdir,
        write_embeddings=args.embeddings,
        **overrides,
    )
    paths = run_pipeline(config)
    print(json.dumps(paths, sort_keys=True))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="textlds",
        description="Learn a linear dynamical system over text and embed tokens.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("counts", help="accumulate co-occurrence statistics")
    p.add_argument("--input", required=True, help="UTF-8 corpus, one sentence per line")
    p.add_argument("--max-types", type=int, default=200_000, dest="max_types")
    p.add_argument("--max-lag", type=int, default=7, dest="max_lag")
    p.add_argument("--pseudo", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_counts)

    p = sub.add_parser("train-ssid", help="subspace identification from counts")
    p.add_argument("--counts", required=True)
    p.add_argument("--h", type=int, required=True)
    p.add_argument("--r", type=int, default=ssid_mod.R_SSID_DEFAULT)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train_ssid)

    p = sub.add_parser("train-em", help="EM refinement of an initial model")
    p.add_argument("--counts", required=True)
    p.add_argument("--init", required=True)
    p.add_argument("--mode", choices=("asos", "exact"), default="asos")
    p.add_argument("--iters", type=int, default=em_mod.EM_MAX_ITERS_DEFAULT)
    p.add_argument("--r", type=int, default=ssid_mod.R_EM_DEFAULT)
    p.add_argument("--corpus", help="tokenized corpus (exact mode only)")
    p.add_argument("--out", required=True)
    p.add_argument("--trace", help="line-delimited iteration records")
    p.set_defaults(func=_cmd_train_em)

    p = sub.add_parser("eval-ll", help="steady-state corpus log-likelihood")
    p.add_argument("--model", required=True)
    p.add_argument("--counts", required=True)
    p.add_argument("--corpus")
    p.set_defaults(func=_cmd_eval_ll)

    p = sub.add_parser("embed", help="write token embeddings for a corpus")
    p.add_argument("--model", required=True)
    p.add_argument("--counts", required=True, help="counts file (for the vocabulary)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("filtered", "smoothed", "normalized"),
                   default="normalized")
    p.add_argument("--binary-out", dest="binary_out")
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser("export-rnn", help="export linear-RNN initialization")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_rnn)

    p = sub.add_parser("analyze-transitions", help="singular pairs of the transition")
    p.add_argument("--model", required=True)
    p.add_argument("--counts", required=True, help="counts file (for the vocabulary)")
    p.add_argument("--top", type=int, default=3)
    p.set_defaults(func=_cmd_analyze_transitions)

    p = sub.add_parser("synth", help="generate synthetic corpora")
    p.add_argument("kind", choices=("lds", "hmm"))
    p.add_argument("--h", type=int, default=3)
    p.add_argument("--states", type=int, default=5)
    p.add_argument("--V", type=int, default=50)
    p.add_argument("--T", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sentence-len", type=int, default=20, dest="sentence_len")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("pipeline", help="full counts -> SSID -> EM -> export run")
    p.add_argument("--input", required=True)
    p.add_argument("--outdir", required=True)
    p.add_argument("--config", help="JSON config file; explicit flags win")
    p.add_argument("--profile", choices=("full", "test"), default="full")
    p.add_argument("--max-types", type=int, default=None, dest="max_types")
    p.add_argument("--max-lag", type=int, default=None, dest="max_lag")
    p.add_argument("--pseudo", type=float, default=None)
    p.add_argument("--h", type=int, default=None)
    p.add_argument("--r-ssid", type=int, default=None, dest="r_ssid")
    p.add_argument("--r-em", type=int, default=None, dest="r_em")
    p.add_argument("--em-iters", type=int, default=None, dest="em_iters")
    p.add_argument("--em-mode", choices=("asos", "exact"), default=None, dest="em_mode")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--embeddings", action="store_true")
    p.set_defaults(func=_cmd_pipeline)

    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
