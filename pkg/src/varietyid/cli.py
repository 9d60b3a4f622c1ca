"""Command line entry point: ``varietyid {gen,train,report}``.

Every option can also be given in a ``--config`` file as ``key = value``
(key = the flag name with dashes turned into underscores). Flags override
the file. Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from .config import ConfigFileError, format_config, read_config

log = logging.getLogger("varietyid")


class UsageError(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        values = tuple(int(s) for s in str(text).split(",") if s.strip())
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if not values:
        raise UsageError("expected at least one integer")
    return values


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(s) for s in str(text).split(",") if s.strip())
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


def _choice(*valid: str) -> Callable[[str], str]:
    def convert(text: str) -> str:
        if text not in valid:
            raise UsageError(f"invalid value {text!r}; choose from {', '.join(valid)}")
        return text
    convert.valid = valid  # type: ignore[attr-defined]
    return convert


@dataclass(frozen=True)
class Opt:
    key: str
    convert: Callable[[str], Any]
    default: Any
    help: str
    flag: bool = False  # store_true switch

    @property
    def dest(self) -> str:
        return self.key

    @property
    def option(self) -> str:
        return "--" + self.key.replace("_", "-")


REGIMES = ("clf", "ctr-pt", "ctr-ft", "ctr-pt+clf", "ctr-pt+ctr-ft")
LOSSES = ("sc", "tm", "ms")

GEN_OPTS = [
    Opt("out", str, None, "output corpus directory (required)"),
    Opt("regions", int, 17, "number of regions"),
    Opt("cities_per_region", int, 3, "cities per region (>= 3)"),
    Opt("speakers_per_city", int, 1, "speakers per city"),
    Opt("sentences", int, 10, "distinct sentences, shared by every city"),
    Opt("repeats", int, 5, "recordings per (speaker, sentence)"),
    Opt("latent_dim", int, 16, "latent dimension D"),
    Opt("feature_dim", int, 32, "frame feature dimension F"),
    Opt("frames_mean", int, 20, "mean frames per utterance"),
    Opt("frames_jitter", int, 5, "utterance length varies by +- this many frames"),
    Opt("sigma_region", float, 1.0, "spread of region centroids"),
    Opt("sigma_city", float, 0.3, "spread of cities around their region"),
    Opt("sigma_speaker", float, 0.1, "speaker offset spread"),
    Opt("sigma_sentence", float, 0.5, "sentence pattern spread"),
    Opt("sigma_noise", float, 1.0, "per-frame noise"),
    Opt("fractions", _float_list, (0.8, 0.1, 0.1), "train,val,test sample fractions"),
    Opt("seed", int, 0, "generator and split seed"),
]

TRAIN_OPTS = [
    Opt("corpus", str, None, "corpus directory from `gen` (required)"),
    Opt("out", str, None, "output directory; one seed_<s> subdirectory per seed (required)"),
    Opt("regime", _choice(*REGIMES), "clf", "training regime: " + ", ".join(REGIMES)),
    Opt("loss", _choice(*LOSSES), "ms", "contrastive loss: " + ", ".join(LOSSES)),
    Opt("seeds", _int_list, (1, 2, 3), "comma-separated run seeds"),
    Opt("batch_size", int, 32, "utterances per batch"),
    Opt("epochs", int, 10, "epochs per phase"),
    Opt("ctr_weight", float, 1.0, "weight of the contrastive term during multi-task fine-tuning"),
    Opt("hidden_dim", int, 64, "encoder hidden size"),
    Opt("lr", float, 1e-4, "peak learning rate"),
    Opt("weight_decay", float, 1e-2, "decoupled weight decay"),
    Opt("warmup_fraction", float, 0.1, "fraction of steps spent warming up"),
    Opt("beta1", float, 0.9, "AdamW beta1"),
    Opt("beta2", float, 0.999, "AdamW beta2"),
    Opt("eps", float, 1e-8, "AdamW epsilon"),
    Opt("tau", float, 0.1, "SC temperature"),
    Opt("margin", float, 0.05, "TM margin"),
    Opt("alpha", float, 2.0, "MS positive scale"),
    Opt("beta", float, 50.0, "MS negative scale"),
    Opt("lam", float, 1.0, "MS similarity offset lambda"),
    Opt("epsilon", float, 0.1, "MS mining slack"),
    Opt("similarity", _choice("cosine", "dot"), "cosine", "MS similarity"),
    Opt("supcon_denominator", _choice("negatives_only", "all"), "negatives_only",
        "SC denominator: negatives only, or all other samples"),
]

REPORT_OPTS = [
    Opt("runs", None, None, "run directories from `train` (required)"),
    Opt("out", str, ".", "output directory"),
    Opt("tsne", _bool, False, "render t-SNE of each run's test embeddings", flag=True),
    Opt("confusion", _bool, False, "render each run's confusion matrix", flag=True),
    Opt("png", _bool, True, "also write matplotlib PNG figures"),
    Opt("perplexity", float, 30.0, "t-SNE perplexity"),
    Opt("tsne_iter", int, 1000, "t-SNE iterations"),
    Opt("tsne_seed", int, 0, "t-SNE initialization seed"),
    Opt("raw_counts", _bool, False, "shade confusion cells by count instead of row fraction", flag=True),
]


def _add_opts(parser: argparse.ArgumentParser, opts: Sequence[Opt]) -> None:
    parser.add_argument("--config", help="key = value file; flags override it")
    for o in opts:
        default_txt = "" if o.default is None else f" (default: {format_config({'': o.default})[3:].strip()})"
        if o.key == "runs":
            parser.add_argument("--runs", nargs="+", default=None, help=o.help)
        elif o.flag:
            parser.add_argument(o.option, dest=o.dest, action="store_const", const="true",
                                default=None, help=o.help)
        else:
            parser.add_argument(o.option, dest=o.dest, default=None, metavar=o.key.upper(),
                                help=o.help + default_txt)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="varietyid",
        description="Region identification on synthetic speech-like corpora: generate, train, report.",
        epilog="Exit codes: 0 success, 1 runtime failure, 2 configuration error.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = {}  # type: ignore[attr-defined]
    for name, help_text in (
        ("gen", "generate a synthetic corpus with city-disjoint splits"),
        ("train", "train one regime for each seed and evaluate on test"),
        ("report", "summary table and figures for trained runs"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_opts(p, COMMANDS[name][0])
        parser.subcommands[name] = p  # type: ignore[attr-defined]
    return parser


def resolve(args: argparse.Namespace, opts: Sequence[Opt]) -> dict[str, Any]:
    """Defaults, then the config file, then flags."""
    raw: dict[str, Any] = {}
    if args.config:
        raw.update(read_config(args.config))
    known = {o.key for o in opts}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
    for o in opts:
        v = getattr(args, o.dest)
        if v is not None:
            raw[o.key] = v
    out = {}
    for o in opts:
        if o.key not in raw:
            out[o.key] = o.default
            continue
        v = raw[o.key]
        if o.key == "runs":
            out[o.key] = list(v) if isinstance(v, list) else str(v).split()
            continue
        try:
            out[o.key] = o.convert(v)
        except UsageError as exc:
            raise UsageError(f"--{o.key.replace('_', '-')}: {exc}") from None
        except ValueError:
            raise UsageError(f"--{o.key.replace('_', '-')}: cannot parse {v!r}") from None
    return out


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen(cfg: dict[str, Any]) -> None:
    from .dataset import SyntheticConfig, build_splits, check_splits, generate_corpus, split_summary, write_manifest

    if not cfg["out"]:
        raise UsageError("--out is required")
    syn = SyntheticConfig(
        n_regions=cfg["regions"], cities_per_region=cfg["cities_per_region"],
        speakers_per_city=cfg["speakers_per_city"], sentences=cfg["sentences"],
        repeats=cfg["repeats"], latent_dim=cfg["latent_dim"], feature_dim=cfg["feature_dim"],
        frames_mean=cfg["frames_mean"], frames_jitter=cfg["frames_jitter"],
        sigma_region=cfg["sigma_region"], sigma_city=cfg["sigma_city"],
        sigma_speaker=cfg["sigma_speaker"], sigma_sentence=cfg["sigma_sentence"],
        sigma_noise=cfg["sigma_noise"], seed=cfg["seed"],
    )
    try:
        syn.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if len(cfg["fractions"]) != 3:
        raise UsageError("--fractions needs three values")

    out = Path(cfg["out"])
    manifest = generate_corpus(syn, out)
    manifest = build_splits(manifest, cfg["fractions"], seed=cfg["seed"])
    check_splits(manifest)
    write_manifest(manifest, out)
    (out / "config.used").write_text(format_config(cfg), encoding="utf-8")
    for split, (n, c) in split_summary(manifest).items():
        print(f"{split}\t{n} utterances\t{c} cities")


def _run_config(cfg: dict[str, Any]):
    from .contrastive import ContrastiveParams
    from .training import RunConfig

    ctr = ContrastiveParams(
        tau=cfg["tau"], margin=cfg["margin"], alpha=cfg["alpha"], beta=cfg["beta"], lam=cfg["lam"],
        epsilon=cfg["epsilon"], similarity=cfg["similarity"], supcon_denominator=cfg["supcon_denominator"],
    )
    return RunConfig(
        regime=cfg["regime"], loss=cfg["loss"], ctr_weight=cfg["ctr_weight"], contrastive=ctr,
        batch_size=cfg["batch_size"], max_epochs=cfg["epochs"], seeds=cfg["seeds"],
        hidden_dim=cfg["hidden_dim"], peak_lr=cfg["lr"], weight_decay=cfg["weight_decay"],
        beta1=cfg["beta1"], beta2=cfg["beta2"], eps=cfg["eps"], warmup_fraction=cfg["warmup_fraction"],
    )


def cmd_train(cfg: dict[str, Any]) -> None:
    from .dataset import read_manifest
    from .evaluation import format_pm
    from .training import ConfigError, load_corpus_data, run_seeds

    for key in ("corpus", "out"):
        if not cfg[key]:
            raise UsageError(f"--{key} is required")
    run_cfg = _run_config(cfg)
    try:
        run_cfg.validate()
    except ConfigError as exc:
        raise UsageError(str(exc)) from None

    data = load_corpus_data(read_manifest(cfg["corpus"]))
    text = format_config(cfg)
    results, agg = run_seeds(run_cfg, data, cfg["out"], config_text=text)
    for r in results:
        print(f"seed {r.seed}\taccuracy {100 * r.report.accuracy:.2f}\tmacro_f1 {100 * r.report.macro_f1:.2f}")
    print(f"mean\taccuracy {format_pm(*agg.mean_std('accuracy'))}\tmacro_f1 {format_pm(*agg.mean_std('macro_f1'))}")


def _run_settings(run: Path) -> dict[str, str]:
    path = run / "config.used"
    return read_config(path) if path.exists() else {}


def _embedding_source(run: Path) -> Path:
    """The run itself, or its lowest-numbered seed subdirectory."""
    if (run / "embeddings.slv1").exists():
        return run
    seeds = sorted((p for p in run.glob("seed_*") if (p / "embeddings.slv1").exists()),
                   key=lambda p: int(p.name.split("_", 1)[1]))
    if not seeds:
        raise FileNotFoundError(f"no embeddings under {run}")
    return seeds[0]


def _read_embedding_labels(path: Path) -> list[str]:
    lines = path.read_text(encoding="utf-8").splitlines()
    return [line.split("|")[1] for line in lines[1:] if line]


def cmd_report(cfg: dict[str, Any]) -> None:
    from .analysis import TsneConfig, render_confusion, render_scatter, tsne
    from .dataset import read_features
    from .evaluation import format_pm, read_confusion_tsv, read_report_tsv

    runs = cfg["runs"]
    if not runs:
        raise UsageError("--runs needs at least one run directory")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    names: list[str] = []
    for run in runs:
        name = Path(run).resolve().name
        if name in names:
            name = f"{name}_{len(names)}"
        names.append(name)

    rows = ["run\tloss\tctr_pt\tctr_ft\tclf_ft\tn_runs\taccuracy\tmacro_f1"]
    mark = lambda b: "✓" if b else "✗"
    for run_str, name in zip(runs, names):
        run = Path(run_str)
        settings = _run_settings(run)
        regime = settings.get("regime", "clf")
        pt = "ctr-pt" in regime
        ft = regime in ("ctr-ft", "ctr-pt+ctr-ft")
        clf = regime != "ctr-pt"
        loss = settings.get("loss", "-") if (pt or ft) else "-"
        metrics = read_report_tsv(run / "test_report.tsv")
        n_runs = len(settings.get("seeds", "1").split(",")) if not (run / "embeddings.slv1").exists() else 1
        rows.append("\t".join([
            name, loss, mark(pt), mark(ft), mark(clf), str(n_runs),
            format_pm(*metrics["accuracy"]), format_pm(*metrics["macro_f1"]),
        ]))

        if cfg["confusion"]:
            cm = read_confusion_tsv(run / "confusion.tsv")
            normalize = not cfg["raw_counts"]
            (out / f"confusion_{name}.svg").write_text(render_confusion(cm, normalize, title=name), encoding="utf-8")
            if cfg["png"]:
                from .plotting import plot_confusion
                plot_confusion(cm, out / f"confusion_{name}.png", normalize, title=name)
        if cfg["tsne"]:
            src = _embedding_source(run)
            emb = read_features(src / "embeddings.slv1")
            labels = _read_embedding_labels(src / "embeddings.labels")
            tcfg = TsneConfig(perplexity=cfg["perplexity"], n_iter=cfg["tsne_iter"], seed=cfg["tsne_seed"])
            proj = tsne(emb, tcfg, labels=labels)
            (out / f"tsne_{name}.svg").write_text(render_scatter(proj, title=name), encoding="utf-8")
            if cfg["png"]:
                from .plotting import plot_projection
                plot_projection(proj, out / f"tsne_{name}.png", title=name)

    (out / "report.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    (out / "report.config.used").write_text(
        format_config({**cfg, "runs": " ".join(cfg["runs"])}), encoding="utf-8")
    print("\n".join(rows))


COMMANDS = {
    "gen": (GEN_OPTS, cmd_gen),
    "train": (TRAIN_OPTS, cmd_train),
    "report": (REPORT_OPTS, cmd_report),
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on malformed flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    opts, func = COMMANDS[args.command]
    sub = parser.subcommands[args.command]  # type: ignore[attr-defined]
    try:
        cfg = resolve(args, opts)
    except (UsageError, ConfigFileError) as exc:
        sub.print_usage(sys.stderr)
        print(f"varietyid {args.command}: error: {exc}", file=sys.stderr)
        return 2
    try:
        func(cfg)
    except UsageError as exc:
        sub.print_usage(sys.stderr)
        print(f"varietyid {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"varietyid {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
