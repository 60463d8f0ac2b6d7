"""Command-line interface.

Every subcommand writes exactly one JSON document to stdout; logs and error
messages go to stderr. Exit codes: 0 success, 1 generic failure or
``inspect`` violations, 2 invalid arguments or configuration, 3 out of
cluster, 4 file-format error, 5 shard-merge error, 6 adapter error,
7 analysis error, 8 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .adapters import merge_lora
from .errors import GradprintError
from .famclass import (
    DEFAULT_THRESHOLD,
    Registry,
    best_permutation_accuracy,
    classify_unknown,
    fit_centroid_kmeans_detailed,
    pairwise_distance,
    standard_kmeans,
)
from .fingerprint import (
    ExtractionConfig,
    extract_fingerprint,
    load_fingerprint,
    save_fingerprint,
    sensitivity_profile,
)
from .perturb import STRATEGY_NAMES, NoiseParams
from .synth import SynthSpec, families_of, generate_corpus, load_ground_truth, split_roles
from .taxonomy import classify_layer
from .tensorfile import SafetensorsFile, describe, merge_shards, validate

log = logging.getLogger("gradprint")

SEED_ENV = "GRADPRINT_SEED"
EXIT_OUT_OF_CLUSTER = 3
EXIT_USAGE = 2
EXIT_IO = 8


@dataclass
class RunConfig:
    global_seed: int = 42
    iterations: int = 30
    sample_size: int = 500_000
    mode: str = "sampled"
    per_category_k: int = 3
    all_layers: bool = False
    workers: int = 1
    threshold: float = DEFAULT_THRESHOLD
    components: int = 2
    noise: dict = field(default_factory=lambda: asdict(NoiseParams()))
    log_level: str = "WARNING"

    def extraction(self) -> ExtractionConfig:
        return ExtractionConfig(
            global_seed=self.global_seed,
            iterations=self.iterations,
            sample_size=self.sample_size,
            per_category_k=self.per_category_k,
            mode=self.mode,
            noise=NoiseParams(**self.noise),
            all_layers=self.all_layers,
            workers=self.workers,
        )


_CONFIG_ALIASES = {"seed": "global_seed"}


def load_config_file(path: str | os.PathLike) -> dict:
    """Read a TOML or JSON config file into RunConfig keyword arguments."""
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as f:
            doc = tomllib.load(f)
    else:
        with open(path, encoding="utf-8") as f:
            doc = json.load(f)
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for key, value in doc.items():
        key = _CONFIG_ALIASES.get(key, key)
        if key not in known:
            raise ValueError(f"{path}: unknown config key {key!r}")
        out[key] = value
    return out


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults < $GRADPRINT_SEED < config file < command-line flags."""
    cfg = RunConfig()
    if os.environ.get(SEED_ENV):
        cfg.global_seed = int(os.environ[SEED_ENV])
    if getattr(args, "config", None):
        for key, value in load_config_file(args.config).items():
            if key == "noise":
                value = {**cfg.noise, **value}
            setattr(cfg, key, value)
    flag_map = {
        "seed": "global_seed", "iterations": "iterations", "sample_size": "sample_size",
        "workers": "workers", "threshold": "threshold", "components": "components", "log_level": "log_level",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "exact", False):
        cfg.mode = "exact"
    if getattr(args, "all_layers", False):
        cfg.all_layers = True
    for key in ("eps", "sigma", "weight", "keep_fraction", "cycles"):
        value = getattr(args, key, None)
        if value is not None:
            cfg.noise = {**cfg.noise, key: value}
    return cfg


def _emit(doc) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, allow_nan=False) + "\n")
    sys.stdout.flush()


# -- subcommands ------------------------------------------------------------------

def cmd_inspect(args, cfg) -> int:
    src = SafetensorsFile(args.model, strict=False)
    violations = validate(src.index)
    tensors = [
        {
            "name": t.name,
            "dtype": t.dtype.name,
            "shape": list(t.shape),
            "category": classify_layer(t.name).label,
            "eligible": len(t.shape) >= 2,
            "data_offsets": list(t.data_offsets),
        }
        for t in src.index.tensors.values()
    ]
    _emit({
        "file": str(args.model),
        "header_len": src.index.header_len,
        "data_region_len": src.index.data_region_len,
        "metadata": src.index.metadata,
        "tensors": tensors,
        "violations": [describe(v) for v in violations],
    })
    for v in violations:
        log.error("violation: %s", describe(v))
    return 0 if not violations else 1


def cmd_merge_shards(args, cfg) -> int:
    strategy = "pattern" if args.pattern else ("index" if args.index else None)
    shard_set = merge_shards(args.directory, args.output, strategy)
    _emit({
        "output": str(args.output),
        "strategy": shard_set.source,
        "shards": [p.name for p, _ in shard_set.shards],
        "tensors": len(shard_set.order),
    })
    return 0


def cmd_merge_adapter(args, cfg) -> int:
    targets = merge_lora(args.base, args.adapter, args.output)
    _emit({"output": str(args.output), "merged_targets": targets})
    return 0


def cmd_fingerprint(args, cfg) -> int:
    fp = extract_fingerprint(args.model, cfg.extraction(), model_name=args.name)
    save_fingerprint(fp, args.output)
    _emit({"output": str(args.output), "fingerprint": fp.to_dict(), "run_config": asdict(cfg)})
    return 0


def cmd_compare(args, cfg) -> int:
    a, b = load_fingerprint(args.fp1), load_fingerprint(args.fp2)
    registry = Registry.load(args.registry) if args.registry else None
    report = pairwise_distance(a, b, registry).to_dict()
    if registry is None:
        report["note"] = "unnormalized"
    _emit({"a": a.model_name, "b": b.model_name, **report})
    return 0


def cmd_build_registry(args, cfg) -> int:
    bases = [load_fingerprint(p) for p in args.bases]
    members = [load_fingerprint(p) for p in args.members or []]
    fit = fit_centroid_kmeans_detailed(
        bases, members, families=args.families, threshold=cfg.threshold, k=cfg.components, seed=cfg.global_seed
    )
    fit.registry.save(args.output)
    _emit({
        "output": str(args.output),
        "families": fit.registry.families,
        "iterations": fit.result.iterations,
        "inertia": fit.result.inertia,
        "provenance": fit.registry.provenance,
    })
    return 0


def cmd_classify(args, cfg) -> int:
    registry = Registry.load(args.registry)
    if args.threshold is not None:
        registry.threshold = args.threshold
    report = classify_unknown(registry, load_fingerprint(args.fingerprint))
    _emit(report.to_dict())
    return EXIT_OUT_OF_CLUSTER if report.out_of_cluster else 0


def cmd_sensitivity(args, cfg) -> int:
    strategy = NoiseParams(**cfg.noise).build(args.noise)
    profile = sensitivity_profile(
        args.model, strategy, iterations=cfg.iterations, seed=cfg.global_seed,
        **({"targets": args.targets} if args.targets else {}),
    )
    _emit(profile.to_dict())
    return 0


def cmd_synth(args, cfg) -> int:
    if args.spec:
        with open(args.spec, encoding="utf-8") as f:
            spec = SynthSpec.from_dict(json.load(f))
    else:
        spec = SynthSpec()
    truth = generate_corpus(spec, args.output)
    _emit({"output": str(args.output), "models": len(truth["models"]), "spec": truth["spec"]})
    return 0


def run_eval(corpus, cfg: RunConfig, baseline_seeds: int = 10) -> dict:
    """Fingerprint a synthetic corpus and score family attribution against its ground truth."""
    corpus = Path(corpus)
    truth = load_ground_truth(corpus)
    bases, members = split_roles(truth)
    extraction = cfg.extraction()
    fps = {name: extract_fingerprint(corpus / name, extraction) for name in bases + members}
    families = families_of(truth, bases)
    member_families = families_of(truth, members)
    fit = fit_centroid_kmeans_detailed(
        [fps[n] for n in bases], [fps[n] for n in members], families=families,
        threshold=cfg.threshold, k=cfg.components, seed=cfg.global_seed,
    )
    reports = [classify_unknown(fit.registry, fps[n]) for n in members]
    correct = [r.family == f for r, f in zip(reports, member_families)]
    labels = np.array([families.index(f) for f in families + member_families])
    cluster_acc = float(np.mean(fit.result.labels == labels))
    baseline = [
        float(best_permutation_accuracy(standard_kmeans(fit.points, len(families), s).labels, labels))
        for s in range(baseline_seeds)
    ]
    return {
        "accuracy": float(np.mean(correct)),
        "clustering_accuracy": cluster_acc,
        "standard_kmeans_accuracy": baseline,
        "members": len(members),
        "misclassified": [
            {"model": n, "true": f, "predicted": r.family, "min_distance": r.min_distance}
            for n, f, r, ok in zip(members, member_families, reports, correct) if not ok
        ],
        "registry": fit.registry.to_dict(),
    }


def cmd_eval(args, cfg) -> int:
    result = run_eval(args.corpus, cfg, args.baseline_seeds)
    result["run_config"] = asdict(cfg)
    print(f"accuracy: {result['accuracy']:.4f}", file=sys.stderr)
    _emit(result)
    return 0


# -- parser -----------------------------------------------------------------------

def _extraction_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help=f"global seed (default 42, or ${SEED_ENV})")
    p.add_argument("--iterations", type=int, help="perturbation rounds (default 30)")
    p.add_argument("--sample-size", type=int, help="sampled gradient entries per layer (default 500000)")
    p.add_argument("--exact", action="store_true", help="exact statistics instead of sampling")
    p.add_argument("--all-layers", action="store_true", help="pool every eligible layer into global statistics")
    p.add_argument("--workers", type=int, help="worker threads (results do not depend on this)")
    for name in ("eps", "sigma", "weight", "keep-fraction"):
        p.add_argument(f"--{name}", type=float, help="noise parameter override")
    p.add_argument("--cycles", type=int, help="noise parameter override")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration")
    common.add_argument("--log-level", help="logging level for stderr (default WARNING)")

    parser = argparse.ArgumentParser(prog="gradprint", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"gradprint {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("inspect", parents=[common], help="list tensors and layout violations")
    p.add_argument("model")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("merge-shards", parents=[common], help="merge a sharded checkpoint")
    p.add_argument("directory")
    p.add_argument("-o", "--output", required=True)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--pattern", action="store_true", help="ignore the index file; match shard filenames")
    g.add_argument("--index", action="store_true", help="require model.safetensors.index.json")
    p.set_defaults(func=cmd_merge_shards)

    p = sub.add_parser("merge-adapter", parents=[common], help="fold a LoRA adapter into a base model")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_merge_adapter)

    p = sub.add_parser("fingerprint", parents=[common], help="extract a 16-value fingerprint")
    p.add_argument("model")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--name", help="model name stored in the fingerprint (default: file stem)")
    _extraction_flags(p)
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("compare", parents=[common], help="distance between two fingerprints")
    p.add_argument("fp1")
    p.add_argument("fp2")
    p.add_argument("--registry")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("build-registry", parents=[common], help="fit family centroids from base fingerprints")
    p.add_argument("--bases", nargs="+", required=True)
    p.add_argument("--members", nargs="*")
    p.add_argument("--families", nargs="+", help="family names, one per base (default: model names)")
    p.add_argument("--threshold", type=float)
    p.add_argument("--components", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_build_registry)

    p = sub.add_parser("classify", parents=[common], help="attribute a fingerprint to a family")
    p.add_argument("--registry", required=True)
    p.add_argument("--threshold", type=float, help="override the registry threshold")
    p.add_argument("fingerprint")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("sensitivity", parents=[common], help="per-layer gradient-norm sensitivity")
    p.add_argument("model")
    p.add_argument("--noise", required=True, choices=sorted(STRATEGY_NAMES))
    p.add_argument("--iterations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--targets", nargs="+", help="layer-name substrings to profile")
    for name in ("eps", "sigma", "weight", "keep-fraction"):
        p.add_argument(f"--{name}", type=float)
    p.add_argument("--cycles", type=int)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic model corpus")
    p.add_argument("--spec", help="SynthSpec JSON (default: 4 families x 6 derivatives)")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", parents=[common], help="end-to-end accuracy on a synthetic corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--baseline-seeds", type=int, default=10)
    p.add_argument("--threshold", type=float)
    p.add_argument("--components", type=int)
    _extraction_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
    except (ValueError, OSError) as exc:
        print(f"gradprint: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=cfg.log_level.upper(), stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, cfg)
    except GradprintError as exc:
        print(f"gradprint: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, TypeError, KeyError) as exc:
        print(f"gradprint: invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"gradprint: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
