"""Command-line driver for the full experiment lifecycle.

One JSON config file describes the dataset, model, training, and eval
settings; subcommands select the lifecycle stage.  All outputs land under
``--out`` together with a manifest listing produced files and the config
hash.  Exit codes: 0 success, 2 config error, 3 data error, 4 numerical
abort.
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import evaluation
from .data import (DataError, SyntheticSpec, dataset_summary, generate_synthetic,
                   parse_behaviors_tsv, parse_news_tsv, split_dataset,
                   validate_dataset, write_behaviors_tsv, write_news_tsv)
from .encoders import MINI_PLM, NewsEncoderSpec, param_count
from .model import ModelSpec, NewsTokenTable, Recommender
from .tensor import NumericalError, load_checkpoint, save_checkpoint
from .text import build_vocab, tokenize
from .training import (TrainConfig, build_training_samples, mlm_pretrain, train)
from .users import UserEncoderSpec

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class ConfigError(ValueError):
    pass


# reference results from large-scale runs on the public English benchmark;
# annotation only -- not reproducible at desk scale
REFERENCE_AUC = {
    "ebnr": 66.54, "naml": 67.78, "npa": 67.87, "lstur": 68.04, "nrms": 68.18,
    "nrms-bert": 69.50, "naml-bert": 69.42, "nrms-unilm": 70.64,
}
REFERENCE_NOTE = "reference, not reproducible at desk scale"


# ---------------------------------------------------------------------------
# config loading / validation
# ---------------------------------------------------------------------------

_ALLOWED = {
    "": {"seed", "dataset", "model", "train", "eval", "compare"},
    "dataset": {"synthetic", "paths", "split", "vocab", "markets_filter"},
    "dataset.split": {"test_fraction", "valid_fraction", "policy",
                      "allow_random_fallback"},
    "dataset.vocab": {"min_count", "max_size"},
    "model": {"news_encoder", "user_encoder", "max_title_len", "history_cap"},
    "model.news_encoder": {"kind", "d_model", "num_heads", "depth", "conv_window",
                           "pooling", "finetune_last_k", "dropout"},
    "model.user_encoder": {"kind", "d_model", "num_heads"},
    "train": {"learning_rate", "batch_size", "shards", "negatives_k", "epochs",
              "mlm_rate", "mlm_epochs", "mlm_learning_rate"},
    "eval": {"split", "metrics"},
    "compare": {"axis", "variants", "num_seeds", "epochs"},
}
_SYNTH_KEYS = set(SyntheticSpec().to_dict())


def _check_keys(section: dict, path: str):
    allowed = _ALLOWED.get(path)
    if allowed is None:
        return
    unknown = set(section) - allowed
    if unknown:
        where = path or "top level"
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in {where}")
    for key, val in section.items():
        if isinstance(val, dict):
            _check_keys(val, f"{path}.{key}" if path else key)


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(cfg, "")
    if "dataset" in cfg and "synthetic" in cfg["dataset"]:
        unknown = set(cfg["dataset"]["synthetic"]) - _SYNTH_KEYS
        if unknown:
            raise ConfigError(f"unknown synthetic key(s) {sorted(unknown)}")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def model_spec_from(cfg: dict) -> ModelSpec:
    m = cfg.get("model", {})
    try:
        news = NewsEncoderSpec(**m.get("news_encoder", {}))
        user_kw = dict(m.get("user_encoder", {}))
        user_kw.setdefault("d_model", news.d_model)
        user = UserEncoderSpec(**user_kw)
        return ModelSpec(news=news, user=user,
                         max_title_len=m.get("max_title_len", 30),
                         history_cap=m.get("history_cap", 50))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid model section: {e}") from e


def train_config_from(cfg: dict, seed: int) -> TrainConfig:
    t = {k: v for k, v in cfg.get("train", {}).items()
         if k not in ("mlm_epochs", "mlm_learning_rate")}
    try:
        return TrainConfig(seed=seed, **t)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid train section: {e}") from e


class DatasetBundle:
    """Articles, impressions, splits, and vocabulary for one run."""

    def __init__(self, cfg: dict, seed: int):
        ds = cfg.get("dataset")
        if not ds:
            raise ConfigError("config has no dataset section")
        self.per_market = {}
        if "synthetic" in ds:
            synth = dict(ds["synthetic"])
            synth.setdefault("seed", seed)
            try:
                self.spec = SyntheticSpec(**synth)
            except (TypeError, DataError) as e:
                raise ConfigError(f"invalid synthetic spec: {e}") from e
            self.per_market = generate_synthetic(self.spec)
        elif "paths" in ds:
            self.spec = None
            for entry in ds["paths"]:
                market = entry.get("market", "EN-US")
                arts, bad_n = parse_news_tsv(entry["news"], market=market)
                imps, bad_b = parse_behaviors_tsv(entry["behaviors"])
                if bad_n or bad_b:
                    click.echo(f"warning: {len(bad_n)} malformed news lines, "
                               f"{len(bad_b)} malformed behavior lines "
                               f"({market})", err=True)
                self.per_market[market] = (arts, imps)
        else:
            raise ConfigError("dataset needs either 'synthetic' or 'paths'")

        keep = ds.get("markets_filter")
        if keep:
            missing = set(keep) - set(self.per_market)
            if missing:
                raise DataError(f"markets_filter references unknown markets "
                                f"{sorted(missing)}")
            self.per_market = {m: v for m, v in self.per_market.items()
                               if m in keep}

        self.articles = [a for arts, _ in self.per_market.values() for a in arts]
        self.impressions = [i for _, imps in self.per_market.values()
                            for i in imps]
        validate_dataset(self.articles, self.impressions)

        split_cfg = ds.get("split", {})
        self.splits = split_dataset(
            self.impressions,
            test_fraction=split_cfg.get("test_fraction", 1.0 / 6.0),
            valid_fraction=split_cfg.get("valid_fraction", 0.1),
            seed=seed, policy=split_cfg.get("policy", "time"),
            allow_random_fallback=split_cfg.get("allow_random_fallback", False))

        vocab_cfg = ds.get("vocab", {})
        self.vocab = build_vocab((a.title for a in self.articles),
                                 min_count=vocab_cfg.get("min_count", 1),
                                 max_size=vocab_cfg.get("max_size", 100000))
        self.user_ids = sorted({i.user_id for i in self.impressions})

    def topic_labels(self, table: NewsTokenTable):
        by_id = {a.news_id: a for a in self.articles}
        labels = []
        for nid in table.news_ids:
            a = by_id[nid]
            labels.append(a.topic_id if a.topic_id is not None else a.category)
        return labels


class Manifest:
    def __init__(self, out_dir: Path, cfg: dict):
        self.out_dir = out_dir
        self.cfg_hash = config_hash(cfg)
        self.files: list[str] = []
        out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out_dir / name

    def write(self):
        payload = {"config_sha256": self.cfg_hash, "files": sorted(self.files)}
        with open(self.out_dir / "manifest.json", "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)


def _build_model(cfg, bundle, seed) -> tuple[Recommender, NewsTokenTable]:
    mspec = model_spec_from(cfg)
    model = Recommender(mspec, bundle.vocab, user_ids=bundle.user_ids, seed=seed)
    table = NewsTokenTable(bundle.articles, bundle.vocab, mspec.max_title_len)
    return model, table


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


@click.group()
def main():
    """Two-tower news recommendation experiments."""


def _common(fn):
    fn = click.option("--config", "config_path", required=True,
                      type=click.Path(exists=False))(fn)
    fn = click.option("--out", "out_dir", default="out",
                      type=click.Path(file_okay=False))(fn)
    fn = click.option("--seed", default=None, type=int,
                      help="override the config seed")(fn)
    return fn


def _run(fn):
    """Translate exceptions into the documented exit codes."""
    try:
        fn()
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(EXIT_CONFIG)
    except (DataError, FileNotFoundError) as e:
        click.echo(f"data error: {e}", err=True)
        sys.exit(EXIT_DATA)
    except NumericalError as e:
        click.echo(f"numerical abort: {e}", err=True)
        sys.exit(EXIT_NUMERICAL)


@main.command("gen-data")
@_common
def cmd_gen_data(config_path, out_dir, seed):
    """Generate synthetic TSV datasets and print a summary table."""

    def body():
        cfg = load_config(config_path)
        run_seed = seed if seed is not None else cfg.get("seed", 0)
        ds = cfg.get("dataset", {})
        if "synthetic" not in ds:
            raise ConfigError("gen-data requires a dataset.synthetic section")
        synth = dict(ds["synthetic"])
        synth.setdefault("seed", run_seed)
        try:
            spec = SyntheticSpec(**synth)
        except TypeError as e:
            raise ConfigError(f"invalid synthetic spec: {e}") from e
        per_market = generate_synthetic(spec)
        manifest = Manifest(Path(out_dir), cfg)
        multi = len(per_market) > 1
        for market, (arts, imps) in per_market.items():
            suffix = f".{market}" if multi else ""
            write_news_tsv(manifest.path(f"news{suffix}.tsv"), arts)
            write_behaviors_tsv(manifest.path(f"behaviors{suffix}.tsv"), imps)
            summary = dataset_summary(arts, imps)
            click.echo(f"market {market}")
            for key, val in summary.items():
                click.echo(f"  {key:20s} {val:>10,}")
        manifest.write()

    _run(body)


@main.command("pretrain")
@_common
def cmd_pretrain(config_path, out_dir, seed):
    """MLM-pretrain the mini PLM news encoder on the dataset's titles."""

    def body():
        cfg = load_config(config_path)
        run_seed = seed if seed is not None else cfg.get("seed", 0)
        bundle = DatasetBundle(cfg, run_seed)
        mspec = model_spec_from(cfg)
        if mspec.news.kind != MINI_PLM:
            raise ConfigError("pretraining requires news_encoder.kind=mini_plm")
        from .encoders import build_news_encoder
        encoder = build_news_encoder(mspec.news, bundle.vocab.size,
                                     mspec.max_title_len, seed=run_seed)
        n_params = param_count(mspec.news, bundle.vocab.size, mspec.max_title_len)
        click.echo(f"encoder depth={mspec.news.depth} d={mspec.news.d_model} "
                   f"param_count={n_params}")
        seqs = [tokenize(a.title, bundle.vocab, mspec.max_title_len)
                for a in bundle.articles]
        t = cfg.get("train", {})
        out_bias, losses = mlm_pretrain(
            seqs, encoder, bundle.vocab.size,
            mask_rate=t.get("mlm_rate", 0.15),
            epochs=t.get("mlm_epochs", 40),
            learning_rate=t.get("mlm_learning_rate", 3e-3),
            seed=run_seed)
        manifest = Manifest(Path(out_dir), cfg)
        ckpt = dict(encoder.params)
        ckpt["mlm.out_bias"] = out_bias
        save_checkpoint(manifest.path("pretrained.ckpt"), ckpt)
        bundle.vocab.save(manifest.path("vocab.txt"))
        with open(manifest.path("pretrain_loss.csv"), "w", encoding="utf-8") as f:
            f.write("epoch,mlm_loss\n")
            for i, loss in enumerate(losses, 1):
                f.write(f"{i},{loss:.6f}\n")
        manifest.write()
        click.echo(f"final MLM loss {losses[-1]:.4f}")

    _run(body)


def _train_once(cfg, bundle, run_seed, from_pretrained=None, scratch=True):
    model, table = _build_model(cfg, bundle, run_seed)
    if from_pretrained:
        arrays = load_checkpoint(from_pretrained)
        model.load_state({"news." + k: v for k, v in arrays.items()
                          if k != "mlm.out_bias"}, strict=False)
        model.apply_finetune_policy()
    tcfg = train_config_from(cfg, run_seed)
    samples, skipped = build_training_samples(
        bundle.splits["train"], tcfg.negatives_k, seed=run_seed,
        history_cap=model.spec.history_cap)
    if skipped:
        click.echo(f"skipped {skipped} click(s) without negatives", err=True)
    result = train(model, table, samples, tcfg,
                   valid_impressions=bundle.splits["valid"])
    return model, table, result


@main.command("train")
@_common
@click.option("--from-pretrained", "pretrained", default=None,
              type=click.Path(exists=False),
              help="initialize the news encoder from a pretrain checkpoint "
                   "and apply the finetune policy")
@click.option("--scratch", is_flag=True, help="random initialization (default)")
def cmd_train(config_path, out_dir, seed, pretrained, scratch):
    """Train the two-tower model with listwise negative-sampling loss."""

    def body():
        cfg = load_config(config_path)
        run_seed = seed if seed is not None else cfg.get("seed", 0)
        bundle = DatasetBundle(cfg, run_seed)
        model, table, result = _train_once(cfg, bundle, run_seed,
                                           from_pretrained=pretrained)
        manifest = Manifest(Path(out_dir), cfg)
        model.save(manifest.path("model.ckpt"), manifest.path("user_ids.txt"))
        bundle.vocab.save(manifest.path("vocab.txt"))
        result.write_csv(manifest.path("loss.csv"))
        manifest.write()
        last = result.history[-1]
        click.echo(f"epoch {last['epoch']}: train_loss={last['train_loss']:.4f} "
                   f"valid_auc={last['valid_auc']:.4f}")

    _run(body)


@main.command("evaluate")
@_common
@click.option("--checkpoint", default=None, type=click.Path(exists=False))
@click.option("--oracle", is_flag=True,
              help="debug scorer: scores equal labels (all metrics 1.0)")
def cmd_evaluate(config_path, out_dir, seed, checkpoint, oracle):
    """Evaluate a checkpoint on the test split; write an EvalReport JSON."""

    def body():
        cfg = load_config(config_path)
        run_seed = seed if seed is not None else cfg.get("seed", 0)
        bundle = DatasetBundle(cfg, run_seed)
        model, table = _build_model(cfg, bundle, run_seed)
        if checkpoint:
            model.load(checkpoint)
        split = cfg.get("eval", {}).get("split", "test")
        impressions = bundle.splits[split]
        override = (lambda labels: labels.astype(float)) if oracle else None
        report = evaluation.evaluate(model, impressions, table,
                                     score_override=override)
        manifest = Manifest(Path(out_dir), cfg)
        with open(manifest.path("report.json"), "w", encoding="utf-8") as f:
            f.write(report.to_json())
        with open(manifest.path("per_impression.csv"), "w",
                  encoding="utf-8") as f:
            f.write("auc,mrr,ndcg5,ndcg10,num_candidates,num_positives\n")
            for m in report.per_impression:
                f.write(f"{m.auc:.12f},{m.mrr:.12f},{m.ndcg5:.12f},"
                        f"{m.ndcg10:.12f},{m.num_candidates},{m.num_positives}\n")
        manifest.write()
        click.echo(json.dumps(report.means, sort_keys=True))

    _run(body)


def _compare_variants(cfg):
    cmp_cfg = cfg.get("compare")
    if not cmp_cfg or "axis" not in cmp_cfg:
        raise ConfigError("compare requires a compare section with an axis")
    axis = cmp_cfg["axis"]
    if axis == "pooling":
        variants = cmp_cfg.get("variants", ["cls", "average", "attention"])
    elif axis == "depth":
        variants = cmp_cfg.get("variants", [2, 4, 8])
    elif axis == "encoder":
        variants = cmp_cfg.get("variants", ["cnn", "self_attn", "mini_plm"])
    elif axis == "pretraining":
        variants = cmp_cfg.get("variants", ["scratch", "pretrained"])
    else:
        raise ConfigError(f"unknown compare axis {axis!r}")
    return axis, variants, cmp_cfg.get("num_seeds", 3)


def _apply_variant(cfg, axis, variant):
    out = json.loads(json.dumps(cfg))  # deep copy
    news = out.setdefault("model", {}).setdefault("news_encoder", {})
    if axis == "pooling":
        news["pooling"] = variant
    elif axis == "depth":
        news["kind"] = MINI_PLM
        news["depth"] = int(variant)
    elif axis == "encoder":
        news["kind"] = variant
    if "epochs" in out.get("compare", {}):
        out.setdefault("train", {})["epochs"] = out["compare"]["epochs"]
    return out


@main.command("compare")
@_common
def cmd_compare(config_path, out_dir, seed):
    """Train variants along one axis over several seeds; emit a table."""

    def body():
        cfg = load_config(config_path)
        base_seed = seed if seed is not None else cfg.get("seed", 0)
        axis, variants, num_seeds = _compare_variants(cfg)
        manifest = Manifest(Path(out_dir), cfg)
        rows = []
        for variant in variants:
            vcfg = _apply_variant(cfg, axis, variant)
            metrics = {"auc": [], "mrr": [], "ndcg5": [], "ndcg10": []}
            pcount = None
            for s in range(num_seeds):
                run_seed = base_seed + s
                bundle = DatasetBundle(vcfg, run_seed)
                pretrained_path = None
                if axis == "pretraining" and variant == "pretrained":
                    pre_dir = Path(out_dir) / f"pretrain_seed{run_seed}"
                    _pretrain_for_compare(vcfg, bundle, run_seed, pre_dir)
                    pretrained_path = pre_dir / "pretrained.ckpt"
                model, table, _ = _train_once(vcfg, bundle, run_seed,
                                              from_pretrained=pretrained_path)
                report = evaluation.evaluate(model, bundle.splits["test"], table)
                for k in metrics:
                    metrics[k].append(report.means[k])
                pcount = model.total_param_count()
            row = {"variant": str(variant), "param_count": pcount}
            for k, vals in metrics.items():
                row[f"{k}_mean"] = float(np.mean(vals))
                row[f"{k}_std"] = float(np.std(vals))
            ref = REFERENCE_AUC.get(str(variant).lower())
            row["reference_auc"] = "" if ref is None else f"{ref} ({REFERENCE_NOTE})"
            rows.append(row)
            click.echo(f"{variant}: auc={row['auc_mean']:.4f}"
                       f"±{row['auc_std']:.4f} params={pcount}")
        cols = list(rows[0])
        with open(manifest.path("comparison.csv"), "w", encoding="utf-8") as f:
            f.write(",".join(cols) + "\n")
            for row in rows:
                f.write(",".join(_csv_cell(row[c]) for c in cols) + "\n")
        with open(manifest.path("comparison.txt"), "w", encoding="utf-8") as f:
            f.write(f"axis: {axis} ({num_seeds} seeds)\n")
            for row in rows:
                f.write(f"{row['variant']:>12s}  auc {row['auc_mean']:.4f}"
                        f"±{row['auc_std']:.4f}  params {row['param_count']}"
                        + (f"  [{row['reference_auc']}]"
                           if row["reference_auc"] else "") + "\n")
        manifest.write()

    _run(body)


def _pretrain_for_compare(cfg, bundle, run_seed, out_dir: Path):
    from .encoders import build_news_encoder
    mspec = model_spec_from(cfg)
    if mspec.news.kind != MINI_PLM:
        raise ConfigError("pretraining variants require news_encoder.kind=mini_plm")
    encoder = build_news_encoder(mspec.news, bundle.vocab.size,
                                 mspec.max_title_len, seed=run_seed)
    seqs = [tokenize(a.title, bundle.vocab, mspec.max_title_len)
            for a in bundle.articles]
    t = cfg.get("train", {})
    out_bias, _ = mlm_pretrain(seqs, encoder, bundle.vocab.size,
                               mask_rate=t.get("mlm_rate", 0.15),
                               epochs=t.get("mlm_epochs", 40),
                               learning_rate=t.get("mlm_learning_rate", 3e-3),
                               seed=run_seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = dict(encoder.params)
    ckpt["mlm.out_bias"] = out_bias
    save_checkpoint(out_dir / "pretrained.ckpt", ckpt)


def _csv_cell(v):
    s = f"{v:.6f}" if isinstance(v, float) else str(v)
    return '"' + s + '"' if "," in s else s


@main.command("export-embeddings")
@_common
@click.option("--checkpoint", default=None, type=click.Path(exists=False))
def cmd_export_embeddings(config_path, out_dir, seed, checkpoint):
    """Project news embeddings to 2-D and score topic discriminability."""

    def body():
        cfg = load_config(config_path)
        run_seed = seed if seed is not None else cfg.get("seed", 0)
        bundle = DatasetBundle(cfg, run_seed)
        model, table = _build_model(cfg, bundle, run_seed)
        if checkpoint:
            model.load(checkpoint)
        emb = evaluation.encode_all_news(model, table)
        proj, ratios = evaluation.pca_project(emb, out_dims=2)
        labels = bundle.topic_labels(table)
        silhouette = evaluation.discriminability(emb, labels)
        manifest = Manifest(Path(out_dir), cfg)
        with open(manifest.path("embeddings_2d.csv"), "w",
                  encoding="utf-8") as f:
            f.write("news_id,x,y,topic_id\n")
            for nid, (x, y), lab in zip(table.news_ids, proj, labels):
                f.write(f"{nid},{x:.6f},{y:.6f},{lab}\n")
        with open(manifest.path("embedding_summary.json"), "w",
                  encoding="utf-8") as f:
            json.dump({"silhouette": silhouette,
                       "explained_variance_ratio": list(map(float, ratios))},
                      f, indent=2, sort_keys=True)
        manifest.write()
        click.echo(f"silhouette={silhouette:.4f}")

    _run(body)


if __name__ == "__main__":
    main()
