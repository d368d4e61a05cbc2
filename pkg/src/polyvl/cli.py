"""Command line: synth, cs-preview, pretrain, finetune, eval, ablate.

Every training/eval command resolves its configuration (file + --set
overrides), writes the resolved snapshot into a run directory named by the
config hash, and refuses to reuse a non-empty run directory unless --force.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import figures
from .config import RunConfig, load_config
from .corpus import (
    generate_synthetic_multilingual_corpus,
    generate_synthetic_multimodal_corpus,
    load_lexicon,
    load_multimodal_corpus,
    load_text_corpus,
    save_lexicon,
    save_multimodal_corpus,
    save_text_corpus,
)
from .errors import ConfigError, DataError, NumericalError
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .objectives import pretrain, write_trace
from .retrieval import (
    LanguageData,
    RetrievalSplit,
    fine_tune,
    run_setting,
    split_from_images,
    write_reports,
)
from .streams import CodeSwitchPolicy, code_switch_caption


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we map usage errors to 1
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="polyvl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config entry (repeatable)")
        p.add_argument("--seed", type=int, help="override every seed in the config")
        p.add_argument("--out", default="runs", help="parent directory for run outputs")
        p.add_argument("--force", action="store_true",
                       help="allow writing into an existing run directory")

    common(sub.add_parser("synth", help="generate synthetic corpora and lexicon"))
    common(sub.add_parser("pretrain", help="run multitask pre-training"))
    common(sub.add_parser("finetune", help="fine-tune a checkpoint for retrieval"))
    common(sub.add_parser("eval", help="evaluate retrieval under one setting"))
    common(sub.add_parser("ablate", help="run an ablation sweep and tabulate mR"))

    preview = sub.add_parser("cs-preview", help="print original/code-switched caption pairs")
    preview.add_argument("--corpus", required=True, help="multimodal corpus JSONL")
    preview.add_argument("--lexicon", required=True, help="lexicon TSV")
    preview.add_argument("--beta", type=float, default=0.5, help="per-word replacement prob")
    preview.add_argument("--languages", default="", help="comma list; default all lexicon languages")
    preview.add_argument("-n", type=int, default=5, help="pairs to print")
    preview.add_argument("--seed", type=int, default=0)
    return parser


# ---------------------------------------------------------------------------
# Shared plumbing.
# ---------------------------------------------------------------------------

def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        for section in ("corpus", "model", "pretrain", "finetune"):
            cfg.sections[section]["seed"] = args.seed
    return cfg


def _run_dir(args, cfg: RunConfig, command: str) -> Path:
    run_dir = Path(args.out) / f"{command}-{cfg.resolved_hash()}"
    if run_dir.exists() and any(run_dir.iterdir()) and not args.force:
        raise ConfigError(f"run directory {run_dir} already has outputs; pass --force to overwrite")
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save_snapshot(run_dir / "config.ini")
    return run_dir


def _data_path(cfg: RunConfig, key: str, required: bool = True) -> Path | None:
    raw = cfg.section("data").get(key)
    if raw is None:
        if required:
            raise DataError(f"config entry data.{key} is required for this command")
        return None
    path = Path(raw)
    if not path.exists():
        raise DataError(f"data.{key} points to a missing file: {path}")
    return path


def load_retrieval_split(path) -> RetrievalSplit:
    """Multimodal-corpus JSONL with an optional per-record image_id field."""
    images = load_multimodal_corpus(path)
    ids = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            if line.strip():
                rec = json.loads(line)
                ids.append(int(rec.get("image_id", lineno)))
    return split_from_images(images, image_ids=ids)


def _language_datasets(cfg: RunConfig, need_train: set[str] | None) -> dict[str, LanguageData]:
    data = cfg.section("data")
    langs = sorted(k[len("test_"):] for k in data if k.startswith("test_"))
    if not langs:
        raise DataError("no data.test_<language> entries configured")
    datasets = {}
    for lang in langs:
        test = load_retrieval_split(_data_path(cfg, f"test_{lang}"))
        train = None
        if f"train_{lang}" in data:
            train = load_retrieval_split(_data_path(cfg, f"train_{lang}"))
        datasets[lang] = LanguageData(test=test, train=train)
    for lang in need_train or set():
        if lang not in datasets or datasets[lang].train is None:
            raise DataError(f"setting requires data.train_{lang}")
    return datasets


def _derive_model_config(cfg: RunConfig, images) -> ModelConfig:
    kwargs = cfg.model_kwargs()
    if images:
        feature_dim = len(images[0].regions[0].feature)
        n_classes = max(r.class_id for img in images for r in img.regions) + 1
    else:
        feature_dim, n_classes = 16, 8  # unused by text-only runs
    return ModelConfig(vocab_size=1, n_language_ids=1,
                       region_feature_dim=feature_dim, n_classes=max(1, n_classes),
                       **kwargs)


# ---------------------------------------------------------------------------
# Commands.
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolve_config(args)
    run_dir = _run_dir(args, cfg, "synth")
    spec = cfg.corpus_spec()

    docs, stem_lexicon = generate_synthetic_multilingual_corpus(spec)
    images, prototypes = generate_synthetic_multimodal_corpus(spec)

    # one lexicon covering both the text stems and the caption vocabulary, so
    # code-switched training and cipher-language evaluation share a dictionary
    languages = corpus_mod.synthetic_language_codes(spec.n_languages)
    caption_words = sorted({w for img in images for w in img.caption})
    caption_lexicon = corpus_mod.make_cipher_lexicon(caption_words, languages)
    lexicon = corpus_mod.BilingualLexicon(
        {**stem_lexicon.entries, **caption_lexicon.entries})

    save_text_corpus(docs, run_dir / "text.jsonl")
    save_multimodal_corpus(images, run_dir / "images.jsonl")
    for lang in languages:
        if lang == corpus_mod.ENGLISH:
            continue
        translated = [corpus_mod.translate_image(img, lexicon, lang) for img in images]
        save_multimodal_corpus(translated, run_dir / f"images_{lang}.jsonl")
    save_lexicon(lexicon, run_dir / "lexicon.tsv")
    (run_dir / "prototypes.json").write_text(
        json.dumps({"prototypes": prototypes.tolist()}), encoding="utf-8")
    print(f"wrote {len(docs)} documents, {len(images)} captioned images -> {run_dir}")
    return 0


def cmd_cs_preview(args) -> int:
    lexicon = load_lexicon(args.lexicon)
    languages = [c for c in args.languages.split(",") if c] or sorted(lexicon.languages)
    policy = CodeSwitchPolicy(lexicon=lexicon, languages=languages, replace_prob=args.beta)
    images = load_multimodal_corpus(args.corpus)
    if not images:
        raise DataError(f"no records in {args.corpus}")
    rng = np.random.default_rng(args.seed)

    for i in range(args.n):
        img = images[int(rng.integers(0, len(images)))]
        words, langs = code_switch_caption(img.caption, policy, rng)
        marked = [f"*{w}*" if lang != corpus_mod.ENGLISH else w
                  for w, lang in zip(words, langs)]
        replaced = sum(1 for lang in langs if lang != corpus_mod.ENGLISH)
        print(f"original: {' '.join(img.caption)}")
        print(f"switched: {' '.join(marked)}   [{replaced} replaced]")
        print()
    return 0


def _load_pretrain_inputs(cfg: RunConfig):
    pre = cfg.pretrain_config()
    multimodal_on = any(t in pre.tasks for t in ("mc_mlm", "mc_mrm", "mc_vlm"))
    text_path = _data_path(cfg, "text_corpus", required="xmlm" in pre.tasks)
    mm_path = _data_path(cfg, "mm_corpus", required=multimodal_on)
    lex_path = _data_path(cfg, "lexicon", required=pre.mct_enabled and multimodal_on)

    docs = load_text_corpus(text_path) if text_path else []
    images = load_multimodal_corpus(mm_path) if mm_path else []
    lexicon = load_lexicon(lex_path) if lex_path else None
    return docs, images, lexicon, pre


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    run_dir = _run_dir(args, cfg, "pretrain")
    docs, images, lexicon, pre = _load_pretrain_inputs(cfg)
    model_config = _derive_model_config(cfg, images)

    result = pretrain(docs, images, lexicon, model_config, pre)
    save_checkpoint(result.model, result.tokenizer, run_dir / "checkpoint.pt",
                    extra={"config_hash": cfg.resolved_hash()})
    write_trace(result.trace, run_dir / "trace.jsonl")
    figures.save_loss_curves(result.trace, run_dir / "loss_curves.png")
    print(f"pretrained {pre.total_steps} steps; final total loss "
          f"{result.trace[-1].total:.4f} -> {run_dir}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _resolve_config(args)
    run_dir = _run_dir(args, cfg, "finetune")
    ft = cfg.finetune_config()
    model, tokenizer, _ = load_checkpoint(_data_path(cfg, "checkpoint"))
    split = load_retrieval_split(_data_path(cfg, "train"))
    lex_path = _data_path(cfg, "lexicon", required=ft.mode == "mct")
    lexicon = load_lexicon(lex_path) if lex_path else None

    tuned, trace = fine_tune(model, tokenizer, split, ft, lexicon)
    save_checkpoint(tuned, tokenizer, run_dir / "checkpoint.pt",
                    extra={"config_hash": cfg.resolved_hash()})
    with open(run_dir / "trace.jsonl", "w", encoding="utf-8") as fh:
        for step, value in enumerate(trace):
            fh.write(json.dumps({"step": step, "bce": value}) + "\n")
    _plot_bce(trace, run_dir / "bce_curve.png")
    print(f"fine-tuned {ft.total_steps} steps; final BCE {trace[-1]:.4f} -> {run_dir}")
    return 0


def _plot_bce(trace, path):
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(range(len(trace)), trace, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("BCE")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


_TRAIN_NEEDS = {"zero_shot": set(), "ft_en": {"en"}, "ft_each": None, "ft_all": None}


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    run_dir = _run_dir(args, cfg, "eval")
    setting = cfg.get("eval", "setting")
    ft = cfg.finetune_config()
    model, tokenizer, _ = load_checkpoint(_data_path(cfg, "checkpoint"))

    need = _TRAIN_NEEDS.get(setting)
    datasets = _language_datasets(cfg, need)
    if need is None:  # ft_each / ft_all need training data for every language
        for lang, data in datasets.items():
            if data.train is None:
                raise DataError(f"setting {setting} requires data.train_{lang}")

    lex_path = _data_path(cfg, "lexicon", required=ft.mode == "mct")
    lexicon = load_lexicon(lex_path) if lex_path else None
    reports = run_setting(model, tokenizer, datasets, setting, ft, lexicon,
                          batch_size=cfg.get("eval", "batch_size"))

    metadata = {"setting": setting, "seed": ft.seed, "config_hash": cfg.resolved_hash()}
    write_reports(reports, run_dir / "report.jsonl", metadata)
    figures.write_recall_tsv(reports, run_dir / "report.tsv")
    figures.save_recall_bars(reports, run_dir / "recall.png", title=setting)
    for lang in sorted(reports):
        print(f"{setting} {lang}: mR={reports[lang].mean_recall:.2f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    run_dir = _run_dir(args, cfg, "ablate")
    variants = cfg.variants()
    if not variants:
        raise ConfigError("no [variant.*] sections in the sweep config")

    docs, images, lexicon, _ = _load_pretrain_inputs(cfg)
    setting = cfg.get("eval", "setting")
    ft = cfg.finetune_config()
    model_config = _derive_model_config(cfg, images)

    rows = []
    languages: list[str] = []
    for name in sorted(variants):
        variant_cfg = RunConfig(sections={
            **{k: dict(v) for k, v in cfg.sections.items() if not k.startswith("variant.")},
        })
        variant_cfg.sections["pretrain"].update(variants[name])
        pre = variant_cfg.pretrain_config()

        result = pretrain(docs, images, lexicon if pre.mct_enabled else None,
                          model_config, pre)
        datasets = _language_datasets(cfg, _TRAIN_NEEDS.get(setting))
        reports = run_setting(result.model, result.tokenizer, datasets, setting, ft,
                              lexicon, batch_size=cfg.get("eval", "batch_size"))
        languages = sorted(reports)
        rows.append({
            "variant": name,
            "config_hash": variant_cfg.resolved_hash(),
            "mean_recall": {lang: reports[lang].mean_recall for lang in reports},
        })
        print(f"{name}: " + "  ".join(
            f"{lang}={reports[lang].mean_recall:.2f}" for lang in languages))

    figures.write_sweep_tsv(rows, languages, run_dir / "sweep.tsv")
    figures.save_sweep_chart(rows, languages, run_dir / "sweep.png")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "cs-preview": cmd_cs_preview,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3


def console_main() -> None:
    sys.exit(main())


if __name__ == "__main__":
    console_main()
