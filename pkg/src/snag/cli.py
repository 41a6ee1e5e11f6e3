"""Command-line entry point: dataset generation, training, evaluation and ablation sweeps.

Every command writes its outputs under ``--out`` together with ``manifest.json``;
``snag rerun <manifest> --out <dir>`` repeats the run from the manifest alone.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import (CheckpointError, aligned_table, assign_parameters, load_checkpoint,
                        read_manifest, save_checkpoint, write_csv, write_manifest)
from .config import ConfigError, RunConfig, load_config, parse_config
from .evaluation import HITS, RankResult, eval_ea, eval_kgc
from .graphdata import (AlignmentSet, KnowledgeGraph, ModalityFeatureStore, generate_synthetic,
                        load_alignment, load_attributes, load_features, load_triples,
                        write_alignment, write_attributes, write_features, write_triples)
from .kgc import KgcModel, TrainingDiverged, prepare_stores, train_kgc
from .mmea import MmeaModel, alignment_problem, train_mmea

log = logging.getLogger("snag")

COMMANDS = ("gen", "train-kgc", "train-ea", "eval-kgc", "eval-ea", "ablate")
NOISE_GRID = ((0.2, 0.7), (0.3, 0.6), (0.1, 0.8), (0.4, 0.4), (0.5, 0.2), (0.7, 0.2))
FUSION_VARIANTS = ("FC", "WS", "AT", "TS", "only_g")
FEATURE_MODALITIES = ("v", "s")


class CliError(RuntimeError):
    pass


# datasets


@dataclass
class RunData:
    kg1: KnowledgeGraph
    kg2: KnowledgeGraph | None
    alignment: AlignmentSet | None
    features1: dict[str, ModalityFeatureStore]
    features2: dict[str, ModalityFeatureStore]
    attributes1: list
    attributes2: list


def _write_names(path: Path, names) -> None:
    path.write_text("".join(f"{n}\n" for n in names), encoding="utf-8")


def _read_names(path: Path) -> list[str]:
    return [line for line in path.read_text(encoding="utf-8").split("\n") if line]


def write_graph_dir(path: Path, kg: KnowledgeGraph, features, attributes) -> None:
    path.mkdir(parents=True, exist_ok=True)
    _write_names(path / "entities.tsv", kg.entities)
    _write_names(path / "relations.tsv", kg.relations)
    for split in ("train", "valid", "test"):
        write_triples(path / f"{split}.tsv", kg, split)
    write_attributes(path / "attributes.tsv", attributes, kg)
    for m, store in features.items():
        write_features(path / f"{m}.mmft", store)


def read_graph_dir(path: Path):
    if not (path / "train.tsv").exists():
        raise CliError(f"{path}: no train.tsv")
    optional = lambda name: path / name if (path / name).exists() else None
    ents = _read_names(path / "entities.tsv") if (path / "entities.tsv").exists() else ()
    rels = _read_names(path / "relations.tsv") if (path / "relations.tsv").exists() else ()
    kg = load_triples(path / "train.tsv", optional("valid.tsv"), optional("test.tsv"),
                      entities=ents, relations=rels)
    features = {}
    for m in FEATURE_MODALITIES:
        for name in (f"{m}.mmft", f"{m}.csv"):
            if (path / name).exists():
                features[m] = load_features(path / name, m, kg.entities)
                break
    attrs = load_attributes(path / "attributes.tsv", kg) if (path / "attributes.tsv").exists() else []
    return kg, features, attrs


def write_dataset(root: Path, data: RunData) -> None:
    write_graph_dir(root / "kg1", data.kg1, data.features1, data.attributes1)
    if data.kg2 is not None:
        write_graph_dir(root / "kg2", data.kg2, data.features2, data.attributes2)
        (root / "alignment").mkdir(parents=True, exist_ok=True)
        write_alignment(root / "alignment" / "seed.tsv", data.alignment, data.kg1, data.kg2, "seed")
        write_alignment(root / "alignment" / "test.tsv", data.alignment, data.kg1, data.kg2, "test")


def read_dataset(root: Path) -> RunData:
    kg1, f1, a1 = read_graph_dir(root / "kg1")
    if not (root / "kg2").exists():
        return RunData(kg1, None, None, f1, {}, a1, [])
    kg2, f2, a2 = read_graph_dir(root / "kg2")
    seed = load_alignment(root / "alignment" / "seed.tsv", kg1, kg2)
    test = load_alignment(root / "alignment" / "test.tsv", kg1, kg2)
    alignment = AlignmentSet(np.concatenate([seed.pairs, test.pairs]), len(seed.pairs))
    return RunData(kg1, kg2, alignment, f1, f2, a1, a2)


def load_data(cfg: RunConfig) -> RunData:
    if cfg["data.source"] == "synthetic":
        d = generate_synthetic(cfg.synthetic_spec(), cfg.seed)
        return RunData(d.kg1, d.kg2, d.alignment, d.features1, d.features2,
                       d.attributes1, d.attributes2)
    return read_dataset(Path(cfg["data.dir"]))


def _require_pair(data: RunData) -> None:
    if data.kg2 is None or data.alignment is None:
        raise CliError("entity alignment needs kg2/ and alignment/ in the data directory")


# training and evaluation


def build_kgc_model(cfg: RunConfig, data: RunData) -> KgcModel:
    stores = prepare_stores(data.features1, cfg.seed)
    return KgcModel(data.kg1, stores, cfg.kgc_config(), np.random.default_rng([cfg.seed, 0]))


def build_ea_model(cfg: RunConfig, data: RunData) -> MmeaModel:
    _require_pair(data)
    return MmeaModel(_problem(cfg, data), cfg.ea_config(), np.random.default_rng([cfg.seed, 0]))


def _problem(cfg: RunConfig, data: RunData):
    ea = cfg.ea_config()
    return alignment_problem(data.kg1, data.kg2, data.alignment, data.features1, data.features2,
                             data.attributes1, data.attributes2, ea.d_r, ea.d_a, ea.modalities,
                             seed=cfg.seed)


def evaluate_kgc(model: KgcModel, cfg: RunConfig, kg: KnowledgeGraph) -> RankResult:
    split = cfg["eval.split"]
    if not len(kg.split(split)):
        raise CliError(f"the {split} split is empty; set eval.split or the synth.*_ratio keys")
    return eval_kgc(model, kg, split, filtered=cfg["eval.filtered"])


def evaluate_ea(model: MmeaModel, cfg: RunConfig) -> RankResult:
    emb1, emb2 = model.embeddings()
    return eval_ea(emb1, emb2, model.problem.alignment.test, pool=cfg["eval.pool"],
                   normalize=model.cfg.normalize)


def metric_rows(result: RankResult, task: str, split: str) -> list[tuple]:
    rows = [("task", task), ("split", split), ("queries", len(result.ranks)), ("mrr", result.mrr)]
    rows += [(f"hits@{n}", result.hits(n)) for n in HITS]
    return rows


def _write_metrics(out: Path, result: RankResult, task: str, split: str) -> None:
    rows = metric_rows(result, task, split)
    write_csv(out / "metrics.csv", ("metric", "value"), rows)
    sys.stdout.write(aligned_table(("metric", "value"), rows))


def fit_kgc(cfg: RunConfig, data: RunData, seed: int | None = None):
    seed = cfg.seed if seed is None else seed
    progress = lambda epoch, loss, mrr: log.info("epoch %d loss %.6f valid_mrr %.4f", epoch, loss, mrr)
    return train_kgc(data.kg1, data.features1, cfg.kgc_config(), seed, log=progress)


def fit_ea(cfg: RunConfig, data: RunData, iterative: bool = False, seed: int | None = None):
    _require_pair(data)
    seed = cfg.seed if seed is None else seed
    progress = lambda row: log.info("epoch %d loss %.6f test_hits1 %.4f promoted %d", row["epoch"],
                                    row["loss"], row["test_hits1"], row["promoted"])
    return train_mmea(_problem(cfg, data), cfg.ea_config(), seed, iterative, log=progress)


def _tensors(model) -> dict[str, np.ndarray]:
    return {name: p.data for name, p in model.parameters().items()}


def cmd_gen(cfg: RunConfig, out: Path, args) -> None:
    if cfg["data.source"] != "synthetic":
        raise CliError("gen needs data.source = synthetic")
    write_dataset(out / "data", load_data(cfg))
    print(f"wrote synthetic dataset to {out / 'data'}")


def cmd_train_kgc(cfg: RunConfig, out: Path, args) -> None:
    data = load_data(cfg)
    model, trace = fit_kgc(cfg, data)
    save_checkpoint(out / "model.ckpt", _tensors(model), cfg.echo(), "kgc")
    write_csv(out / "trace.csv", ("epoch", "loss", "valid_mrr"), trace.rows())
    _write_metrics(out, evaluate_kgc(model, cfg, data.kg1), "kgc", cfg["eval.split"])


def cmd_train_ea(cfg: RunConfig, out: Path, args) -> None:
    from .mmea import TRACE_COLUMNS

    data = load_data(cfg)
    model, trace, cache = fit_ea(cfg, data, args.iterative)
    save_checkpoint(out / "model.ckpt", _tensors(model), cfg.echo(), "ea")
    write_csv(out / "trace.csv", TRACE_COLUMNS, ([row[c] for c in TRACE_COLUMNS] for row in trace.rows))
    with open(out / "promoted.tsv", "w", encoding="utf-8") as fh:
        fh.write("epoch\te1\te2\n")
        for epoch, a, b in cache.audit:
            fh.write(f"{epoch}\t{data.kg1.entities[a]}\t{data.kg2.entities[b]}\n")
    _write_metrics(out, evaluate_ea(model, cfg), "ea", f"test/{cfg['eval.pool']}")


def _restore(args, cfg: RunConfig | None, task: str):
    """Rebuild a trained model from its checkpoint; data and eval keys come from ``cfg`` if given."""
    saved_task, echo, tensors = load_checkpoint(args.checkpoint)
    if saved_task != task:
        raise CliError(f"{args.checkpoint} holds a {saved_task} model, not {task}")
    model_cfg = parse_config(echo, f"{args.checkpoint}:config")
    run_cfg = cfg if cfg is not None else model_cfg
    keep = {k: v for k, v in run_cfg.values.items() if k.split(".")[0] in ("data", "synth", "eval")}
    merged = RunConfig({**model_cfg.values, **keep})
    data = load_data(merged)
    model = build_kgc_model(merged, data) if task == "kgc" else build_ea_model(merged, data)
    assign_parameters(model.parameters(), tensors)
    return model, merged, data


def cmd_eval_kgc(cfg: RunConfig, out: Path, args) -> None:
    model, merged, data = _restore(args, cfg if args.use_config else None, "kgc")
    _write_metrics(out, evaluate_kgc(model, merged, data.kg1), "kgc", merged["eval.split"])
    return merged


def cmd_eval_ea(cfg: RunConfig, out: Path, args) -> None:
    model, merged, _ = _restore(args, cfg if args.use_config else None, "ea")
    _write_metrics(out, evaluate_ea(model, merged), "ea", f"test/{merged['eval.pool']}")
    return merged


# ablation


@dataclass
class AblationRow:
    label: str
    group: str
    cfg: RunConfig


def ablation_grid(cfg: RunConfig) -> list[AblationRow]:
    """Default model first, then the noise grid, fusion variants and dropout substitutes."""
    rows = [AblationRow("default", "default", cfg)]
    groups = cfg["ablate.groups"]
    unknown = set(groups) - {"gmnm", "fusion", "dropout"}
    if unknown:
        raise ConfigError(f"ablate.groups: unknown group(s) {sorted(unknown)}")
    if "gmnm" in groups:
        rows.append(AblationRow("gmnm_off", "gmnm", cfg.replace(gmnm__mode="off")))
        for rho, eps in NOISE_GRID:
            if (rho, eps) == (cfg["gmnm.rho"], cfg["gmnm.epsilon"]) and cfg["gmnm.mode"] == "gmnm":
                continue
            rows.append(AblationRow(f"rho={rho},eps={eps}", "gmnm",
                                    cfg.replace(gmnm__mode="gmnm", gmnm__rho=rho, gmnm__epsilon=eps)))
    if "fusion" in groups and cfg["run.task"] == "kgc":
        for variant in FUSION_VARIANTS:
            rows.append(AblationRow(variant, "fusion", cfg.replace(fusion__variant=variant)))
    if "dropout" in groups:
        for p in cfg["ablate.dropout_rates"]:
            rows.append(AblationRow(f"dropout={p}", "dropout",
                                    cfg.replace(gmnm__mode="dropout", gmnm__dropout=p)))
    return rows


ABLATION_HEADER = ("variant", "group", "seeds", "mrr", "hits@1", "hits@10")


def score_run(cfg: RunConfig, seed: int) -> RankResult:
    """Train and evaluate one configuration on the dataset of ``seed``."""
    cfg = cfg.replace(run__seed=seed)
    data = load_data(cfg)
    if cfg["run.task"] == "kgc":
        model, _ = fit_kgc(cfg, data)
        return evaluate_kgc(model, cfg, data.kg1)
    model, _, _ = fit_ea(cfg, data)
    return evaluate_ea(model, cfg)


def run_ablation(cfg: RunConfig) -> list[tuple]:
    seeds = range(cfg.seed, cfg.seed + cfg["ablate.seeds"])
    table = []
    for row in ablation_grid(cfg):
        results = [score_run(row.cfg, s) for s in seeds]
        table.append((row.label, row.group, len(results),
                       float(np.mean([r.mrr for r in results])),
                       float(np.mean([r.hits(1) for r in results])),
                       float(np.mean([r.hits(10) for r in results]))))
        log.info("ablation %s: mrr %.4f", row.label, table[-1][3])
    return table


def cmd_ablate(cfg: RunConfig, out: Path, args) -> None:
    if cfg["ablate.seeds"] < 1:
        raise ConfigError("ablate.seeds must be at least 1")
    table = run_ablation(cfg)
    write_csv(out / "ablation.csv", ABLATION_HEADER, table)
    text = aligned_table(ABLATION_HEADER, table)
    (out / "ablation.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


HANDLERS = {"gen": cmd_gen, "train-kgc": cmd_train_kgc, "train-ea": cmd_train_ea,
            "eval-kgc": cmd_eval_kgc, "eval-ea": cmd_eval_ea, "ablate": cmd_ablate}


# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snag", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"snag {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="section.key = value file (defaults when omitted)")
        p.add_argument("--out", required=True, help="output directory")
        if name == "train-ea":
            p.add_argument("--iterative", action="store_true", help="add the probation phase")
        if name in ("eval-kgc", "eval-ea"):
            p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("rerun", help="repeat a run from its manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return parser


def execute(command: str, cfg: RunConfig, out: Path, args) -> None:
    out.mkdir(parents=True, exist_ok=True)
    # evaluation handlers return the config they actually ran with (checkpoint + data keys)
    used = HANDLERS[command](cfg, out, args) or cfg
    checkpoint = getattr(args, "checkpoint", None)
    write_manifest(out / "manifest.json", {
        "version": __version__, "command": command, "seed": used.seed, "config": used.echo(),
        "iterative": bool(getattr(args, "iterative", False)),
        "checkpoint": str(Path(checkpoint).resolve()) if checkpoint else None})


def rerun(manifest_path: str, out: Path) -> None:
    manifest = read_manifest(manifest_path)
    if manifest["version"] != __version__:
        log.warning("manifest was written by snag %s, running %s", manifest["version"], __version__)
    cfg = parse_config(manifest["config"], f"{manifest_path}:config")
    # for eval commands the checkpoint supplies the model, the manifest the data and eval keys
    args = argparse.Namespace(use_config=True, iterative=manifest.get("iterative", False),
                              checkpoint=manifest.get("checkpoint"))
    execute(manifest["command"], cfg, out, args)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            rerun(args.manifest, Path(args.out))
        else:
            args.use_config = args.config is not None
            execute(args.command, load_config(args.config), Path(args.out), args)
    except ConfigError as exc:
        print(f"snag: config error: {exc}", file=sys.stderr)
        return 2
    except (CliError, CheckpointError, TrainingDiverged, ValueError, OSError) as exc:
        print(f"snag: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


def entry() -> None:
    sys.exit(main())
