"""Command-line front end.

Every run writes into ``<out>/<timestamp>-seed<seed>/`` with a
``manifest.txt`` holding the resolved configuration, the sha256 of every
input and output, and checkpoint parents.  ``--from-manifest`` replays a run.

Configuration precedence: module defaults, then ``--config`` (flat
``key=value`` lines), then command-line flags.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import logging
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import corpus as C
from .contrastive import MsParams
from .encoder import (InjectionConfig, file_sha256, load_encoder, save_encoder,
                      train_injected)
from .evaluation import (RelatednessDataset, clustering_pair_eval, mscm_report, spearman_relatedness,
                         synonym_pairs)
from .gradcheck import run_all
from .kge import (KINDS, REPORT_HEADER, KgeConfig, load_kge, link_prediction_eval, save_kge, train_kge)
from .pipeline import embed_terms, new_encoder, typed_concepts
from .sampling import ConfigError, ContrastiveConfig, train_contrastive
from .synthetic import make_world

logger = logging.getLogger("medkgcl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


@dataclass(frozen=True)
class Param:
    type: type
    default: object
    help: str = ""


PARAMS: dict[str, Param] = {
    "seed": Param(int, 0, "global seed"),
    "out": Param(str, "runs", "parent directory of run directories"),
    # inputs
    "corpus": Param(str, None, "one document per line"),
    "dictionary": Param(str, None, "concept_id<TAB>term"),
    "base_vocab": Param(str, None, "base vocabulary, one token per line"),
    "types": Param(str, None, "concept_id<TAB>semantic_type"),
    "triples": Param(str, None, "head<TAB>relation<TAB>tail"),
    "train": Param(str, None, "training triples"),
    "eval_triples": Param(str, None, "triples to rank"),
    "known": Param(str, None, "comma-separated triple files for filtering"),
    "kge": Param(str, None, "KGE checkpoint"),
    "vocab": Param(str, None, "extended vocabulary"),
    "documents": Param(str, None, "tokenized documents (JSON lines)"),
    "contexts": Param(str, None, "mention contexts (JSON lines)"),
    "encoder": Param(str, None, "encoder checkpoint"),
    "relatedness": Param(str, None, "term_a<TAB>term_b<TAB>score"),
    # corpus
    "window": Param(int, 32, "context window in tokens"),
    "train_ratio": Param(float, 0.90),
    "test_ratio": Param(float, 0.06),
    "valid_ratio": Param(float, 0.04),
    # kge
    "kge_kind": Param(str, "ComplEx", "|".join(KINDS)),
    "kge_dim": Param(int, KgeConfig.dim),
    "kge_epochs": Param(int, KgeConfig.epochs),
    "kge_lr": Param(float, KgeConfig.lr),
    "kge_batch_size": Param(int, KgeConfig.batch_size),
    "kge_negatives": Param(int, KgeConfig.negatives_per_positive),
    "kge_l2": Param(float, KgeConfig.l2),
    # encoder architecture
    "layers": Param(int, 4),
    "hidden": Param(int, 64),
    "heads": Param(int, 4),
    "max_len": Param(int, 64),
    "injection_layer": Param(int, 3),
    "candidates": Param(int, 5),
    "pooling": Param(str, "mean"),
    # injection training
    "inj_steps": Param(int, InjectionConfig.steps),
    "inj_batch_size": Param(int, InjectionConfig.batch_size),
    "inj_lr": Param(float, InjectionConfig.lr),
    "inj_warmup": Param(int, InjectionConfig.warmup),
    "mask_rate": Param(float, InjectionConfig.mask_rate),
    # contrastive training
    "loss": Param(str, "v3", "v1|v2|v3"),
    "cl_epochs": Param(int, ContrastiveConfig.epochs),
    "cl_steps_per_epoch": Param(int, ContrastiveConfig.steps_per_epoch, "0 = one pass over prototypes"),
    "cl_accumulation": Param(int, ContrastiveConfig.accumulation),
    "cl_lr": Param(float, ContrastiveConfig.lr),
    "cl_warmup": Param(int, ContrastiveConfig.warmup),
    "k": Param(int, ContrastiveConfig.k, "positives per prototype"),
    "m": Param(int, ContrastiveConfig.m, "hard negatives per prototype"),
    "n_prototypes": Param(int, ContrastiveConfig.n_prototypes),
    "per_entity": Param(int, ContrastiveConfig.per_entity),
    "per_term_cap": Param(int, ContrastiveConfig.per_term_cap),
    "alpha": Param(float, MsParams.alpha),
    "beta": Param(float, MsParams.beta),
    "epsilon": Param(float, MsParams.epsilon),
    "margin": Param(float, MsParams.margin),
    "pos_margin": Param(float, MsParams.pos_margin),
    "neg_margin": Param(float, MsParams.neg_margin),
    # evaluation
    "mscm_k": Param(int, 40),
    "instances": Param(int, 100, "gradient check instances per function"),
    # synthetic world
    "world_types": Param(int, 4),
    "world_concepts": Param(int, 10, "concepts per type"),
    "world_synonyms": Param(int, 5),
    "world_docs": Param(int, 400),
}

_ENCODER = ["layers", "hidden", "heads", "max_len", "injection_layer", "candidates", "pooling"]
_INJECTION = ["inj_steps", "inj_batch_size", "inj_lr", "inj_warmup", "mask_rate"]
_CONTRASTIVE = ["loss", "cl_epochs", "cl_steps_per_epoch", "cl_accumulation", "cl_lr", "cl_warmup", "k", "m",
                "n_prototypes", "per_entity", "per_term_cap", "alpha", "beta", "epsilon", "margin",
                "pos_margin", "neg_margin"]

# subcommand -> (required inputs, optional inputs, hyperparameters)
COMMANDS: dict[str, tuple[list[str], list[str], list[str]]] = {
    "make-synthetic": ([], [], ["world_types", "world_concepts", "world_synonyms", "world_docs"]),
    "build-corpus": (["corpus", "dictionary", "base_vocab"], [], ["window"]),
    "split-kg": (["triples"], [], ["train_ratio", "test_ratio", "valid_ratio"]),
    "train-kge": (["train"], [], ["kge_kind", "kge_dim", "kge_epochs", "kge_lr", "kge_batch_size",
                                  "kge_negatives", "kge_l2"]),
    "eval-kge": (["kge", "eval_triples"], ["known"], []),
    "train-injected": (["vocab", "documents", "kge"], ["encoder"], _ENCODER + _INJECTION),
    "train-contrastive": (["vocab", "contexts"], ["kge", "encoder"], _ENCODER + _CONTRASTIVE),
    "train-pipelined": (["vocab", "documents", "contexts", "kge"], ["encoder"],
                        _ENCODER + _INJECTION + _CONTRASTIVE),
    "eval-mscm": (["encoder", "vocab", "dictionary", "types"], [], ["mscm_k"]),
    "eval-clustering": (["encoder", "vocab", "dictionary"], [], []),
    "eval-relatedness": (["encoder", "vocab", "relatedness"], [], []),
    "gradcheck": ([], [], ["instances"]),
}

_SIDECARS = {"kge": ".ids.tsv", "encoder": ".cfg"}


class RunError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _parse_value(key, raw):
    p = PARAMS.get(key)
    if p is None:
        raise RunError(f"unknown configuration key {key!r}", EXIT_CONFIG)
    if raw in ("", "None") and p.default is None:
        return None
    try:
        return p.type(raw)
    except ValueError:
        raise RunError(f"bad value for {key}: {raw!r}", EXIT_CONFIG) from None


def read_kv(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise RunError(f"{path}:{n}: expected key=value", EXIT_CONFIG)
            out[key.strip()] = value.strip()
    return out


def resolve_config(command: str, file_values: dict[str, str], flags: dict[str, object]) -> dict[str, object]:
    """Defaults, then config-file values, then flags; only keys the command uses survive."""
    required, optional, hyper = COMMANDS[command]
    keys = ["seed", "out"] + required + optional + hyper
    cfg = {k: PARAMS[k].default for k in keys}
    for k, raw in file_values.items():
        value = _parse_value(k, raw)
        if k in cfg:
            cfg[k] = value
    for k, v in flags.items():
        if v is not None and k in cfg:
            cfg[k] = v
    for k in required:
        if cfg[k] is None:
            raise RunError(f"{command}: missing required input {k!r}", EXIT_CONFIG)
    for k in required + optional:
        if cfg[k] is None:
            continue
        paths = cfg[k].split(",") if k == "known" else [cfg[k]]
        resolved = []
        for p in paths:
            path = Path(p).expanduser().resolve()
            if not path.exists():
                raise RunError(f"{command}: input {k} does not exist: {p}", EXIT_CONFIG)
            resolved.append(str(path))
        cfg[k] = ",".join(resolved)
    if "loss" in cfg and cfg["loss"] not in ("v1", "v2", "v3"):
        raise RunError(f"unknown loss variant {cfg['loss']!r}", EXIT_CONFIG)
    if "kge_kind" in cfg and cfg["kge_kind"] not in KINDS:
        raise RunError(f"unknown KGE model {cfg['kge_kind']!r}", EXIT_CONFIG)
    return cfg


def input_hashes(command: str, cfg) -> list[tuple[str, str]]:
    """sha256 of every input file (and checkpoint sidecar) a command reads."""
    required, optional, _ = COMMANDS[command]
    out = []
    for k in required + optional:
        if cfg.get(k) is None:
            continue
        for i, p in enumerate(str(cfg[k]).split(",")):
            tag = k if k != "known" else f"known{i}"
            out.append((tag, file_sha256(p)))
            side = _SIDECARS.get(k)
            if side and Path(p).with_suffix(side).exists():
                out.append((tag + side, file_sha256(Path(p).with_suffix(side))))
    return out


class Run:
    """One run directory plus its manifest entries."""

    def __init__(self, command: str, cfg: dict[str, object]):
        self.command = command
        self.cfg = cfg
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        base = Path(str(cfg["out"])) / f"{stamp}-seed{cfg['seed']}"
        path, n = base, 1
        while path.exists():
            path = base.with_name(f"{base.name}-{n}")
            n += 1
        path.mkdir(parents=True)
        self.dir = path
        self.extra: list[tuple[str, str]] = []
        self.outputs: list[str] = []

    def file(self, name: str) -> Path:
        self.outputs.append(name)
        return self.dir / name

    def note(self, key: str, value):
        self.extra.append((key, str(value)))

    def write_manifest(self):
        with open(self.dir / "manifest.txt", "w", encoding="utf-8") as fh:
            fh.write(f"subcommand={self.command}\n")
            fh.write(f"seed={self.cfg['seed']}\n")
            for k, v in self.cfg.items():
                fh.write(f"config.{k}={'' if v is None else v}\n")
            for k, v in input_hashes(self.command, self.cfg):
                fh.write(f"input.{k}={v}\n")
            for k, v in self.extra:
                fh.write(f"{k}={v}\n")
            for name in self.outputs:
                p = self.dir / name
                if p.exists():
                    fh.write(f"output.{name}={file_sha256(p)}\n")


# command bodies

def _kge_config(cfg) -> KgeConfig:
    return KgeConfig(dim=cfg["kge_dim"], epochs=cfg["kge_epochs"], lr=cfg["kge_lr"],
                     batch_size=cfg["kge_batch_size"], negatives_per_positive=cfg["kge_negatives"],
                     l2=cfg["kge_l2"], seed=cfg["seed"])


def _injection_config(cfg) -> InjectionConfig:
    return InjectionConfig(steps=cfg["inj_steps"], batch_size=cfg["inj_batch_size"], lr=cfg["inj_lr"],
                           warmup=cfg["inj_warmup"], mask_rate=cfg["mask_rate"], seed=cfg["seed"])


def _contrastive_config(cfg) -> ContrastiveConfig:
    ms = MsParams(alpha=cfg["alpha"], beta=cfg["beta"], epsilon=cfg["epsilon"], margin=cfg["margin"],
                  pos_margin=cfg["pos_margin"], neg_margin=cfg["neg_margin"])
    return ContrastiveConfig(epochs=cfg["cl_epochs"], steps_per_epoch=cfg["cl_steps_per_epoch"],
                             accumulation=cfg["cl_accumulation"], lr=cfg["cl_lr"], warmup=cfg["cl_warmup"],
                             k=cfg["k"], m=cfg["m"], n_prototypes=cfg["n_prototypes"],
                             per_entity=cfg["per_entity"], per_term_cap=cfg["per_term_cap"],
                             seed=cfg["seed"], ms=ms)


def _starting_encoder(cfg, vocab, kge_model):
    if cfg.get("encoder"):
        return load_encoder(cfg["encoder"]), file_sha256(cfg["encoder"])
    kw = dict(num_layers=cfg["layers"], hidden=cfg["hidden"], heads=cfg["heads"], max_len=cfg["max_len"],
              injection_layer=cfg["injection_layer"], candidates=cfg["candidates"], pooling=cfg["pooling"],
              seed=cfg["seed"])
    return new_encoder(vocab, kge_model, **kw), None


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_make_synthetic(run: Run, cfg):
    world = make_world(n_types=cfg["world_types"], concepts_per_type=cfg["world_concepts"],
                       synonyms=cfg["world_synonyms"], n_docs=cfg["world_docs"], seed=cfg["seed"])
    world.write(run.dir)
    for name in ("corpus.txt", "dictionary.tsv", "types.tsv", "triples.tsv", "base_vocab.txt",
                 "relatedness.tsv"):
        run.outputs.append(name)


def cmd_build_corpus(run: Run, cfg):
    documents = C.read_corpus(cfg["corpus"])
    dictionary = C.read_dictionary(cfg["dictionary"])
    with open(cfg["base_vocab"], encoding="utf-8") as fh:
        base = C.Vocabulary.with_specials(line.rstrip("\n") for line in fh if line.strip())
    vocab, mentions, contexts, docs = C.build_corpus(documents, dictionary, base, cfg["window"])
    vocab.save(run.file("vocab.txt"))
    C.write_contexts(run.file("contexts.jsonl"), contexts)
    C.write_documents(run.file("documents.jsonl"), docs)
    run.note("mentions", len(mentions))
    run.note("vocab_size", len(vocab))


def cmd_split_kg(run: Run, cfg):
    triples = C.read_triples(cfg["triples"])
    split = C.split_triples(triples, (cfg["train_ratio"], cfg["test_ratio"], cfg["valid_ratio"]), cfg["seed"])
    C.write_triples(run.file("train.tsv"), split.train)
    C.write_triples(run.file("valid.tsv"), split.valid)
    C.write_triples(run.file("test.tsv"), split.test)


def cmd_train_kge(run: Run, cfg):
    triples = C.read_triples(cfg["train"])
    model, history = train_kge(triples, cfg["kge_kind"], _kge_config(cfg))
    save_kge(model, run.file("kge.bin"))
    run.outputs.append("kge.ids.tsv")
    _write_csv(run.file("kge_loss.csv"), ["epoch", "loss"], [(i, repr(v)) for i, v in enumerate(history)])


def cmd_eval_kge(run: Run, cfg):
    model = load_kge(cfg["kge"])
    eval_ids = model.encode_triples(C.read_triples(cfg["eval_triples"]))
    known = [eval_ids]
    if cfg.get("known"):
        known += [model.encode_triples(C.read_triples(p)) for p in cfg["known"].split(",")]
    report = link_prediction_eval(model, eval_ids, np.concatenate(known))
    with open(run.file("kge_report.tsv"), "w", encoding="utf-8") as fh:
        fh.write(REPORT_HEADER + "\n" + report.as_row(model.kind) + "\n")


def _injection_phase(run: Run, cfg, vocab, kge_model, name):
    docs = C.read_documents(cfg["documents"])
    encoder, parent = _starting_encoder(cfg, vocab, kge_model)
    if encoder.cfg.injection_layer == 0:
        raise RunError("train-injected needs injection_layer >= 1", EXIT_CONFIG)
    before = encoder.entity_table.numpy().tobytes()
    rows = train_injected(encoder, docs, kge_model.entities, _injection_config(cfg))
    if encoder.entity_table.numpy().tobytes() != before:
        raise RunError("entity table changed during training", EXIT_NUMERIC)
    _write_csv(run.file("train_log.csv"), ["step", "loss_total", "loss_mlm", "loss_el"],
               [(s, repr(t), repr(a), repr(b)) for s, t, a, b in rows])
    sha = save_encoder(encoder, run.file(name))
    run.outputs.append(Path(name).with_suffix(".cfg").name)
    run.note(f"checkpoint.{name}", sha)
    run.note(f"checkpoint.{name}.parent", parent or "none")
    return encoder, sha


def _contrastive_phase(run: Run, cfg, vocab, kge_model, encoder, parent, name):
    contexts = C.read_contexts(cfg["contexts"])
    try:
        log = train_contrastive(encoder, contexts, kge_model, cfg["loss"], _contrastive_config(cfg))
    except ConfigError as exc:
        raise RunError(str(exc), EXIT_CONFIG) from None
    _write_csv(run.file("contrastive_log.csv"), ["epoch", "step", "loss"],
               [(e, s, repr(v)) for e, s, v in log.losses])
    with open(run.file("prototypes.tsv"), "w", encoding="utf-8") as fh:
        for concept in sorted(log.prototypes.by_concept):
            fh.write(concept + "\t" + ",".join(map(str, log.prototypes.by_concept[concept])) + "\n")
    run.note("sampling_seed", cfg["seed"])
    sha = save_encoder(encoder, run.file(name))
    run.outputs.append(Path(name).with_suffix(".cfg").name)
    run.note(f"checkpoint.{name}", sha)
    run.note(f"checkpoint.{name}.parent", parent or "none")
    return sha


def cmd_train_injected(run: Run, cfg):
    vocab = C.Vocabulary.load(cfg["vocab"])
    _injection_phase(run, cfg, vocab, load_kge(cfg["kge"]), "encoder.bin")


def cmd_train_contrastive(run: Run, cfg):
    vocab = C.Vocabulary.load(cfg["vocab"])
    kge_model = load_kge(cfg["kge"]) if cfg.get("kge") else None
    encoder, parent = _starting_encoder(cfg, vocab, kge_model)
    _contrastive_phase(run, cfg, vocab, kge_model, encoder, parent, "encoder.bin")


def cmd_train_pipelined(run: Run, cfg):
    """Injection pre-training, then contrastive v3 fine-tuning of the same encoder."""
    if cfg["loss"] != "v3":
        logger.warning("pipelined training fine-tunes with loss %s rather than v3", cfg["loss"])
    vocab = C.Vocabulary.load(cfg["vocab"])
    kge_model = load_kge(cfg["kge"])
    encoder, injected_sha = _injection_phase(run, cfg, vocab, kge_model, "injected.bin")
    final_sha = _contrastive_phase(run, cfg, vocab, kge_model, encoder, injected_sha, "encoder.bin")
    with open(run.file("lineage.tsv"), "w", encoding="utf-8") as fh:
        fh.write("checkpoint\tsha256\tparent\n")
        fh.write(f"injected.bin\t{injected_sha}\t{file_sha256(cfg['encoder']) if cfg.get('encoder') else '-'}\n")
        fh.write(f"encoder.bin\t{final_sha}\t{injected_sha}\n")


def _fmt(x):
    return "-" if x is None else f"{x:.6f}"


def cmd_eval_mscm(run: Run, cfg):
    encoder = load_encoder(cfg["encoder"])
    vocab = C.Vocabulary.load(cfg["vocab"])
    concept_set = typed_concepts(encoder, vocab, C.read_concept_terms(cfg["dictionary"]),
                                 C.read_types(cfg["types"]))
    report = mscm_report(concept_set, cfg["mscm_k"])
    cols = [t for t in report if t != "average"] + ["average"]
    with open(run.file("mscm.tsv"), "w", encoding="utf-8") as fh:
        fh.write("model\t" + "\t".join(cols) + "\n")
        fh.write(Path(cfg["encoder"]).stem + "\t" + "\t".join(_fmt(report[c]) for c in cols) + "\n")


def cmd_eval_clustering(run: Run, cfg):
    encoder = load_encoder(cfg["encoder"])
    vocab = C.Vocabulary.load(cfg["vocab"])
    concept_terms = C.read_concept_terms(cfg["dictionary"])
    terms = sorted({t for ts in concept_terms.values() for t in ts})
    rep = clustering_pair_eval(embed_terms(encoder, vocab, terms), terms, synonym_pairs(concept_terms))
    with open(run.file("clustering.tsv"), "w", encoding="utf-8") as fh:
        fh.write("model\ttheta\taccuracy\tf1\tprecision\trecall\n")
        fh.write(f"{Path(cfg['encoder']).stem}\t{rep.theta:.2f}\t{_fmt(rep.accuracy)}\t{_fmt(rep.f1)}"
                 f"\t{_fmt(rep.precision)}\t{_fmt(rep.recall)}\n")


def cmd_eval_relatedness(run: Run, cfg):
    encoder = load_encoder(cfg["encoder"])
    vocab = C.Vocabulary.load(cfg["vocab"])
    dataset = RelatednessDataset.load(cfg["relatedness"])
    terms = sorted({t for a, b, _ in dataset.pairs for t in (a, b)})
    vecs = dict(zip(terms, embed_terms(encoder, vocab, terms)))
    rho = spearman_relatedness(vecs.__getitem__, dataset)
    with open(run.file("relatedness.tsv"), "w", encoding="utf-8") as fh:
        fh.write("model\tdataset\tspearman\n")
        fh.write(f"{Path(cfg['encoder']).stem}\t{Path(cfg['relatedness']).stem}\t{_fmt(rho)}\n")


def cmd_gradcheck(run: Run, cfg):
    results = run_all(cfg["instances"], cfg["seed"])
    with open(run.file("gradcheck.tsv"), "w", encoding="utf-8") as fh:
        fh.write("function\tinstances\tmax_rel_error\ttolerance\tstatus\n")
        for r in results:
            fh.write(r.line() + "\n")
    for r in results:
        print(r.line())
    if not all(r.passed for r in results):
        raise RunError("gradient check failed", EXIT_NUMERIC)


HANDLERS = {
    "make-synthetic": cmd_make_synthetic,
    "build-corpus": cmd_build_corpus,
    "split-kg": cmd_split_kg,
    "train-kge": cmd_train_kge,
    "eval-kge": cmd_eval_kge,
    "train-injected": cmd_train_injected,
    "train-contrastive": cmd_train_contrastive,
    "train-pipelined": cmd_train_pipelined,
    "eval-mscm": cmd_eval_mscm,
    "eval-clustering": cmd_eval_clustering,
    "eval-relatedness": cmd_eval_relatedness,
    "gradcheck": cmd_gradcheck,
}


def execute(command: str, cfg: dict[str, object]) -> Path:
    """Run one subcommand with a resolved config; returns the run directory.

    On any failure the run directory is removed before the error propagates.
    """
    torch.set_num_threads(1)
    torch.manual_seed(int(cfg["seed"]))
    run = Run(command, cfg)
    try:
        HANDLERS[command](run, cfg)
        run.write_manifest()
    except BaseException:
        shutil.rmtree(run.dir, ignore_errors=True)
        raise
    return run.dir


def manifest_config(path) -> tuple[str, dict[str, str], dict[str, str]]:
    """Subcommand, config values and recorded input hashes from a manifest."""
    kv = read_kv(path)
    if "subcommand" not in kv:
        raise RunError(f"{path}: not a run manifest", EXIT_CONFIG)
    config = {k[len("config."):]: v for k, v in kv.items() if k.startswith("config.")}
    inputs = {k[len("input."):]: v for k, v in kv.items() if k.startswith("input.")}
    return kv["subcommand"], config, inputs


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medkgcl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    for name, (required, optional, hyper) in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key=value file")
        p.add_argument("--from-manifest", help="replay the run recorded in this manifest")
        for key in ["seed", "out"] + required + optional + hyper:
            param = PARAMS[key]
            p.add_argument("--" + key.replace("_", "-"), dest=key, type=param.type, default=None,
                           help=f"{param.help} (default {param.default})".strip())
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    flags = {k: v for k, v in vars(args).items() if k in PARAMS}
    try:
        recorded = {}
        if args.from_manifest and args.config:
            raise RunError("use either --config or --from-manifest", EXIT_CONFIG)
        if args.from_manifest:
            command, file_values, recorded = manifest_config(args.from_manifest)
            if command != args.command:
                raise RunError(f"manifest is for {command}, not {args.command}", EXIT_CONFIG)
        else:
            file_values = read_kv(args.config) if args.config else {}
        cfg = resolve_config(args.command, file_values, flags)
        if recorded:
            current = dict(input_hashes(args.command, cfg))
            changed = sorted(k for k, v in recorded.items() if current.get(k) != v)
            if changed:
                raise RunError("inputs differ from the manifest: " + ", ".join(changed), EXIT_CONFIG)
        run_dir = execute(args.command, cfg)
    except RunError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, IndexError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(run_dir)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
