"""Command-line pipeline: guiders -> transforms -> dataset -> generations -> reports.

Every stage reads one YAML experiment config, writes its artifacts under the
output directory together with a ``manifest.json`` (config snapshot, seed,
input and output hashes, code version), and refuses to consume upstream
artifacts whose bytes no longer match their manifest unless ``--force`` is
given.

Exit codes: 0 success, 2 configuration error, 3 missing or stale upstream
artifact, 4 runtime or numeric failure.
"""
import json
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import click
import yaml

from . import __version__
from .classifiers import classifier_exists, load_classifier
from .core import init_transform, load_model, load_transform, save_model, save_transform
from .core.transform import TransformBlockConfig
from .dataset import (DatasetBuildConfig, build_dataset, corpus_hash, read_dataset, stream_corpus,
                      write_dataset)
from .errors import (BenchmarkAborted, ConfigError, ContractError, DependencyError, InputError,
                     NumericError, PartialResultError)
from .evaluation import (attribute_sweep, compare_latency, compose_report, format_delta,
                         recompute_report, render_latency_table, render_results_table)
from .generation import DecodeConfig, generate, generate_unprompted, read_generations, write_generations
from .training import ChrtTrainConfig, FinetuneConfig, finetune_guider, read_training_log, train_chrt

log = logging.getLogger("reprsteer")

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_RUNTIME = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _pick(cls, d, where):
    d = dict(d or {})
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")
    return d


@dataclass
class ExperimentConfig:
    base_model: str
    attribute: str = "attribute"
    corpora: dict = field(default_factory=dict)
    chrt_variants: list = field(default_factory=lambda: [(2, 1), (1, 1), (1, 2)])
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    eval: dict = field(default_factory=dict)
    output_dir: str = "runs"
    seed: int = 0
    finetune: dict = field(default_factory=dict)
    chrt: dict = field(default_factory=dict)
    transform: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=dict)
    prompts: str = None
    n_unprompted: int = 100
    benchmark: dict = field(default_factory=dict)
    sweep: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path, seed=None, output_dir=None):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        raw = _pick(cls, raw, path.name)
        if "base_model" not in raw:
            raise ConfigError("config needs base_model")
        root = path.parent
        cfg = cls(**raw)
        if seed is not None:
            cfg.seed = seed
        decode = dict(raw.get("decode") or {})
        decode.setdefault("seed", cfg.seed)
        cfg.decode = DecodeConfig(**_pick(DecodeConfig, decode, "decode"))
        cfg.chrt_variants = [tuple(int(x) for x in v) for v in cfg.chrt_variants]
        cfg.output_dir = str(Path(output_dir) if output_dir else root / cfg.output_dir)
        cfg.base_model = str(root / cfg.base_model)
        cfg.corpora = {k: str(root / v) for k, v in (cfg.corpora or {}).items()}
        if cfg.prompts and cfg.prompts != "dataset":
            cfg.prompts = str(root / cfg.prompts)
        if cfg.dataset.get("corpus"):
            cfg.dataset["corpus"] = str(root / cfg.dataset["corpus"])
        scorer = cfg.eval.get("scorer", "base")
        if scorer != "base":
            cfg.eval["scorer"] = str(root / scorer)
        cfg.sweep = dict(cfg.sweep)
        if cfg.sweep.get("transforms"):
            cfg.sweep["transforms"] = [str(root / t) for t in cfg.sweep["transforms"]]
        cfg._root = root
        cfg.validate()
        return cfg

    def validate(self):
        """Resolve every external locator up front so no stage starts on a broken config."""
        missing = []
        if not Path(self.base_model).is_file():
            missing.append(f"base_model {self.base_model}")
        for k, v in self.corpora.items():
            if k not in ("positive", "negative"):
                raise ConfigError(f"unknown corpus class {k!r}")
            if not Path(v).is_file():
                missing.append(f"corpora.{k} {v}")
        for key in ("classifier",):
            loc = self.eval.get(key)
            if loc and not classifier_exists(loc):
                missing.append(f"eval.{key} {loc}")
        scorer = self.eval.get("scorer", "base")
        if scorer != "base" and not Path(scorer).is_file():
            missing.append(f"eval.scorer {scorer}")
        if self.dataset:
            corpus = self.dataset.get("corpus")
            if not corpus or not Path(corpus).is_file():
                missing.append(f"dataset.corpus {corpus}")
            loc = self.dataset.get("classifier") or self.eval.get("classifier")
            if not loc or not classifier_exists(loc):
                missing.append(f"dataset classifier {loc}")
        if self.prompts and self.prompts != "dataset" and not Path(self.prompts).is_file():
            missing.append(f"prompts {self.prompts}")
        for t in self.sweep.get("transforms", []):
            if not Path(t).is_file():
                missing.append(f"sweep transform {t}")
        for loc in self.sweep.get("classifiers", []):
            if not classifier_exists(loc):
                missing.append(f"sweep classifier {loc}")
        if missing:
            raise ConfigError("unresolved locators: " + "; ".join(missing))
        for a, b in self.chrt_variants:
            ChrtTrainConfig(a, b)
        if self.n_unprompted < 1:
            raise ConfigError("n_unprompted must be >= 1")

    def variant_names(self):
        return [ChrtTrainConfig(a, b).variant_name for a, b in self.chrt_variants]

    def snapshot(self):
        return {"base_model": self.base_model, "attribute": self.attribute, "corpora": self.corpora,
                "chrt_variants": [list(v) for v in self.chrt_variants], "decode": self.decode.to_dict(),
                "eval": self.eval, "seed": self.seed, "finetune": self.finetune, "chrt": self.chrt,
                "transform": self.transform, "dataset": self.dataset, "prompts": self.prompts,
                "n_unprompted": self.n_unprompted, "benchmark": self.benchmark, "sweep": self.sweep}


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def sha256_file(path):
    return corpus_hash(path)


def write_manifest(path, stage, config, seed, inputs, outputs, extra=None):
    manifest = {"stage": stage, "code_version": __version__, "seed": seed, "config": config,
                "inputs": {str(p): sha256_file(p) for p in inputs},
                "outputs": {str(p): sha256_file(p) for p in outputs}}
    if extra:
        manifest.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def check_upstream(manifest_path, stage, force=False):
    """Load an upstream manifest and confirm its outputs still hash to the recorded values."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise DependencyError(f"missing artifacts from stage '{stage}' ({manifest_path}); run `{stage}` first")
    manifest = json.loads(manifest_path.read_text())
    for p, digest in manifest["outputs"].items():
        if not Path(p).is_file():
            raise DependencyError(f"stage '{stage}' output {p} is missing; rerun `{stage}`")
        if sha256_file(p) != digest:
            if not force:
                raise DependencyError(f"stage '{stage}' output {p} changed since it was written; "
                                      f"rerun `{stage}` or pass --force")
            log.warning("using stale %s because --force was given", p)
    return manifest


def up_to_date(manifest_path, config, inputs):
    """True when a previous run used the same config and inputs and its outputs are intact."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        return False
    m = json.loads(manifest_path.read_text())
    if m.get("config") != json.loads(json.dumps(config)) or m.get("code_version") != __version__:
        return False
    if m.get("inputs") != {str(p): sha256_file(p) for p in inputs}:
        return False
    return all(Path(p).is_file() and sha256_file(p) == h for p, h in m.get("outputs", {}).items())


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _load_base(cfg):
    base = load_model(cfg.base_model)
    base.head_locked = True
    return base


def _read_corpus(path, tokenizer):
    return [tokenizer.encode(s, add_bos=tokenizer.bos_id is not None) for s in stream_corpus(path) if s.strip()]


def _load_prompts(cfg, out):
    if cfg.prompts == "dataset":
        path = out / "dataset" / "prompts.jsonl"
        if not path.is_file():
            raise DependencyError("prompts come from the dataset stage; run `build-dataset` first")
        return [r.prompt for r in read_dataset(path)], [path]
    if cfg.prompts:
        path = Path(cfg.prompts)
        if path.suffix == ".jsonl":
            return [json.loads(line)["prompt"] for line in path.read_text().splitlines() if line.strip()], [path]
        return [line for line in path.read_text().splitlines() if line.strip()], [path]
    return None, []


def _scorer(cfg, base):
    scorer = cfg.eval.get("scorer", "base")
    if scorer == "base":
        return base
    model = load_model(scorer)
    model.head_locked = True
    return model


def _finetune_config(cfg):
    return FinetuneConfig(**{**_pick(FinetuneConfig, cfg.finetune, "finetune"), "seed": cfg.seed})


def _chrt_config(cfg, a, b):
    d = _pick(ChrtTrainConfig, cfg.chrt, "chrt")
    return ChrtTrainConfig(**{**d, "loss_weight_a": a, "loss_weight_b": b, "seed": cfg.seed})


class Context:
    def __init__(self, config_path, seed, output_dir, dry_run, force):
        self.config_path, self.seed, self.output_dir = config_path, seed, output_dir
        self.dry_run, self.force = dry_run, force

    def config(self):
        if not self.config_path:
            raise ConfigError("--config is required for this command")
        return ExperimentConfig.load(self.config_path, seed=self.seed, output_dir=self.output_dir)


def _plan(stage, inputs, outputs):
    click.echo(f"[dry-run] {stage}")
    for p in inputs:
        click.echo(f"  input  {p}")
    for p in outputs:
        click.echo(f"  output {p}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="Experiment YAML file.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--output-dir", type=click.Path(file_okay=False), default=None, help="Override the output directory.")
@click.option("--dry-run", is_flag=True, help="Validate and print the plan without writing anything.")
@click.option("--force", is_flag=True, help="Rerun up-to-date stages and accept stale upstream artifacts.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def cli(ctx, config_path, seed, output_dir, dry_run, force, verbose):
    """Train and evaluate hidden-state transforms for attribute-controlled generation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    ctx.obj = Context(config_path, seed, output_dir, dry_run, force)


@cli.command("finetune-guiders")
@click.pass_obj
def cmd_finetune_guiders(ctx):
    """Fine-tune LM+ and LM- on the positive and negative corpora with the LM head locked."""
    cfg = ctx.config()
    if set(cfg.corpora) != {"positive", "negative"}:
        raise ConfigError("corpora.positive and corpora.negative are required")
    out = Path(cfg.output_dir) / "guiders"
    inputs = [cfg.base_model, cfg.corpora["positive"], cfg.corpora["negative"]]
    outputs = [out / "lm_plus.npz", out / "lm_minus.npz"]
    ft = _finetune_config(cfg)
    snapshot = {"finetune": vars(ft), "corpora": cfg.corpora, "base_model": cfg.base_model}
    if ctx.dry_run:
        return _plan("finetune-guiders", inputs, outputs)
    if not ctx.force and up_to_date(out / "manifest.json", snapshot, inputs):
        click.echo("finetune-guiders: up to date")
        return
    base = _load_base(cfg)
    heads = {"base": base.head_checksum()}
    for cls, path in zip(("positive", "negative"), outputs):
        guider = finetune_guider(base, _read_corpus(cfg.corpora[cls], base.tokenizer), ft)
        save_model(path, guider, extra={"role": f"guider_{cls}", "seed": cfg.seed})
        heads[path.stem] = guider.head_checksum()
    locked = all(h == heads["base"] for h in heads.values())
    if not locked:
        raise ContractError("guider LM head differs from the base head")
    write_manifest(out / "manifest.json", "finetune-guiders", snapshot, cfg.seed, inputs, outputs,
                   extra={"head_checksums": heads, "head_locked": locked})
    click.echo(f"finetune-guiders: wrote {', '.join(str(p) for p in outputs)}")


@cli.command("train-chrt")
@click.pass_obj
def cmd_train_chrt(ctx):
    """Train one transformation block per configured loss-weight variant."""
    cfg = ctx.config()
    root = Path(cfg.output_dir)
    gdir = root / "guiders"
    if ctx.dry_run:
        if not (gdir / "manifest.json").is_file():
            click.echo("[dry-run] guiders missing; `finetune-guiders` must run first")
        for name in cfg.variant_names():
            _plan(f"train-chrt {name}", [gdir / "lm_plus.npz", gdir / "lm_minus.npz"],
                  [root / "chrt" / name / "tau.npz", root / "chrt" / name / "loss_log.jsonl"])
        return
    check_upstream(gdir / "manifest.json", "finetune-guiders", ctx.force)
    base = _load_base(cfg)
    lm_plus, lm_minus = load_model(gdir / "lm_plus.npz"), load_model(gdir / "lm_minus.npz")
    corpus = (_read_corpus(cfg.corpora["positive"], base.tokenizer)
              + _read_corpus(cfg.corpora["negative"], base.tokenizer))
    tcfg = TransformBlockConfig(**{**cfg.transform, "hidden_dim": base.config.hidden_dim, "seed": cfg.seed})
    inputs = [cfg.base_model, gdir / "lm_plus.npz", gdir / "lm_minus.npz",
              cfg.corpora["positive"], cfg.corpora["negative"]]
    for a, b in cfg.chrt_variants:
        tc = _chrt_config(cfg, a, b)
        vdir = root / "chrt" / tc.variant_name
        outputs = [vdir / "tau.npz", vdir / "loss_log.jsonl"]
        snapshot = {"train": tc.to_dict(), "transform": tcfg.to_dict()}
        if not ctx.force and up_to_date(vdir / "manifest.json", snapshot, inputs):
            click.echo(f"train-chrt {tc.variant_name}: up to date")
            continue
        frozen_before = {"base": base.checksum(), "lm_plus": lm_plus.checksum(), "lm_minus": lm_minus.checksum()}
        tau, _ = train_chrt(base, (lm_plus, lm_minus), init_transform(tcfg), corpus, tc, log_path=outputs[1])
        frozen_after = {"base": base.checksum(), "lm_plus": lm_plus.checksum(), "lm_minus": lm_minus.checksum()}
        if frozen_after != frozen_before:
            raise ContractError("frozen weights changed during transform training")
        read_training_log(outputs[1])
        save_transform(outputs[0], tau, extra={"variant": tc.variant_name, "lambda": tc.lam})
        write_manifest(vdir / "manifest.json", "train-chrt", snapshot, cfg.seed, inputs, outputs,
                       extra={"variant": tc.variant_name, "lambda": tc.lam, "frozen_checksums": frozen_after})
        click.echo(f"train-chrt {tc.variant_name}: wrote {outputs[0]}")


@cli.command("build-dataset")
@click.pass_obj
def cmd_build_dataset(ctx):
    """Stream a corpus and keep a balanced set of confidently labelled sentences."""
    cfg = ctx.config()
    if not cfg.dataset:
        raise ConfigError("config has no dataset section")
    d = dict(cfg.dataset)
    corpus, loc = d.pop("corpus"), d.pop("classifier", None) or cfg.eval.get("classifier")
    offset = int(d.pop("offset", 0))
    bcfg = DatasetBuildConfig(**_pick(DatasetBuildConfig, d, "dataset"))
    out = Path(cfg.output_dir) / "dataset" / "prompts.jsonl"
    if ctx.dry_run:
        return _plan("build-dataset", [corpus], [out])
    classifier = load_classifier(loc)
    records = build_dataset(stream_corpus(corpus, offset), classifier, bcfg)
    manifest = {"stage": "build-dataset", "code_version": __version__, "seed": cfg.seed,
                "config": {**vars(bcfg), "offset": offset}, "classifier": classifier.name,
                "corpus_sha256": corpus_hash(corpus), "inputs": {corpus: corpus_hash(corpus)}}
    path, mpath = write_dataset(out, records, manifest)
    m = json.loads(mpath.read_text())
    m["outputs"] = {str(path): m.pop("output_sha256")}
    mpath.write_text(json.dumps(m, indent=2, sort_keys=True))
    click.echo(f"build-dataset: {len(records)} records -> {path}")


def _variant_transforms(cfg, root, force):
    taus = {}
    for name in cfg.variant_names():
        check_upstream(root / "chrt" / name / "manifest.json", "train-chrt", force)
        taus[name] = load_transform(root / "chrt" / name / "tau.npz")
    return taus


@cli.command("generate")
@click.pass_obj
def cmd_generate(ctx):
    """Sample continuations from the base model and every trained variant."""
    cfg = ctx.config()
    root = Path(cfg.output_dir)
    gen_dir = root / "generations"
    names = ["base"] + cfg.variant_names()
    if ctx.dry_run:
        return _plan("generate", [root / "chrt" / n / "tau.npz" for n in names[1:]],
                     [gen_dir / f"{n}.jsonl" for n in names])
    taus = _variant_transforms(cfg, root, ctx.force)
    prompts, prompt_inputs = _load_prompts(cfg, root)
    base = _load_base(cfg)
    outputs = []
    for name in names:
        chosen = [] if name == "base" else [taus[name]]
        if prompts is None:
            batches = generate_unprompted(base, chosen, None, cfg.decode, cfg.n_unprompted)
        else:
            batches = [generate(base, chosen, None, p, cfg.decode) for p in prompts]
        outputs.append(write_generations(gen_dir / f"{name}.jsonl", batches))
    inputs = [cfg.base_model, *prompt_inputs, *(root / "chrt" / n / "tau.npz" for n in names[1:])]
    write_manifest(gen_dir / "manifest.json", "generate",
                   {"decode": cfg.decode.to_dict(), "prompts": cfg.prompts, "n_unprompted": cfg.n_unprompted},
                   cfg.seed, inputs, outputs)
    click.echo(f"generate: wrote {len(outputs)} generation files to {gen_dir}")


def _latency_for(root, name):
    path = root / "benchmark" / "latency.json"
    if not path.is_file():
        return None
    rows = json.loads(path.read_text())
    if name == "base" and rows:
        return rows[0]["base_seconds"]
    return next((r["steered_seconds"] for r in rows if r["variant"] == name), None)


@cli.command("evaluate")
@click.pass_obj
def cmd_evaluate(ctx):
    """Score generation files and write one report per model plus a summary table."""
    cfg = ctx.config()
    root = Path(cfg.output_dir)
    gen_dir, rep_dir = root / "generations", root / "reports"
    names = ["base"] + cfg.variant_names()
    loc = cfg.eval.get("classifier")
    if not loc:
        raise ConfigError("eval.classifier is required")
    if ctx.dry_run:
        return _plan("evaluate", [gen_dir / f"{n}.jsonl" for n in names], [rep_dir / f"{n}.json" for n in names])
    check_upstream(gen_dir / "manifest.json", "generate", ctx.force)
    classifier = load_classifier(loc)
    base = _load_base(cfg)
    scorer = _scorer(cfg, base)
    threshold = float(cfg.eval.get("threshold", 0.5))
    reports, outputs = {}, []
    for name in names:
        gen_path = gen_dir / f"{name}.jsonl"
        report = compose_report(read_generations(gen_path), classifier, scorer,
                                latency_seconds=_latency_for(root, name), threshold=threshold,
                                metadata={"model": name, "generation_file": str(gen_path),
                                          "generation_sha256": sha256_file(gen_path), "seed": cfg.seed,
                                          "decode": cfg.decode.to_dict()})
        _, mismatches = recompute_report(report, gen_path, classifier, scorer)
        if mismatches:
            raise ContractError(f"{name}: report does not recompute: {mismatches}")
        outputs.append(report.save(rep_dir / f"{name}.json"))
        reports[name] = report
    table = rep_dir / "table.txt"
    table.write_text(render_results_table(reports) + "\n")
    outputs.append(table)
    write_manifest(rep_dir / "manifest.json", "evaluate", {"eval": cfg.eval}, cfg.seed,
                   [gen_dir / f"{n}.jsonl" for n in names], outputs)
    click.echo(table.read_text(), nl=False)


@cli.command("benchmark")
@click.option("--runs", type=int, default=None, help="Timed runs (default from config, else 100).")
@click.pass_obj
def cmd_benchmark(ctx, runs):
    """Time single 25-token continuations for the base model and each variant."""
    cfg = ctx.config()
    root = Path(cfg.output_dir)
    out = root / "benchmark"
    runs = runs or int(cfg.benchmark.get("runs", 100))
    warmup = int(cfg.benchmark.get("warmup", 3))
    prompt = cfg.benchmark.get("prompt", "")
    if ctx.dry_run:
        return _plan("benchmark", [root / "chrt" / n / "tau.npz" for n in cfg.variant_names()],
                     [out / "latency.json", out / "latency.txt"])
    taus = _variant_transforms(cfg, root, ctx.force)
    base = _load_base(cfg)
    dc = DecodeConfig(top_p=cfg.decode.top_p, repetition_penalty=cfg.decode.repetition_penalty,
                      max_new_tokens=cfg.decode.max_new_tokens, num_return=1, seed=cfg.seed, stop_at_eos=False)
    rows, table_rows = [], []
    for name, tau in taus.items():
        r = compare_latency(lambda: generate(base, [], None, prompt, dc),
                            lambda tau=tau: generate(base, [tau], None, prompt, dc), runs=runs, warmup=warmup)
        rows.append({"variant": name, **{k: r[k] for k in ("base_seconds", "steered_seconds", "delta_seconds",
                                                           "relative_overhead", "runs")},
                     "delta": format_delta(r["delta_seconds"])})
        if not table_rows:
            table_rows.append(("base", r["base_seconds"]))
        table_rows.append((name, r["steered_seconds"]))
    out.mkdir(parents=True, exist_ok=True)
    (out / "latency.json").write_text(json.dumps(rows, indent=2))
    (out / "latency.txt").write_text(render_latency_table(table_rows) + "\n")
    write_manifest(out / "manifest.json", "benchmark", {"runs": runs, "warmup": warmup, "prompt": prompt},
                   cfg.seed, [root / "chrt" / n / "tau.npz" for n in taus], [out / "latency.json", out / "latency.txt"])
    click.echo((out / "latency.txt").read_text(), nl=False)


def plot_tradeoff(points, labels, png_path):
    """Attribute-1 vs attribute-2 curve over an alpha sweep, plus a JSON sidecar with the data."""
    if len(points) < 2:
        raise InputError("a trade-off curve needs at least two alpha points")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    png_path = Path(png_path)
    png_path.parent.mkdir(parents=True, exist_ok=True)
    xs = [p["scores"][0] for p in points]
    ys = [p["scores"][1] for p in points]
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.plot(xs, ys, "o-")
    for p, x, y in zip(points, xs, ys):
        ax.annotate(f"α={p['alpha'][0]:.2f}", (x, y), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xlabel(labels[0])
    ax.set_ylabel(labels[1])
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    sidecar = png_path.with_suffix(".json")
    sidecar.write_text(json.dumps({"labels": list(labels), "points": points}, indent=2))
    return png_path, sidecar


def load_tradeoff(sidecar):
    try:
        d = json.loads(Path(sidecar).read_text())
        return d["points"], d["labels"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"{sidecar} is not a trade-off sweep file: {exc}") from exc


@cli.command("plot-tradeoff")
@click.option("--points", "points_path", type=click.Path(dir_okay=False), default=None,
              help="Existing sweep JSON ({labels, points}); otherwise run the config's sweep section.")
@click.pass_obj
def cmd_plot_tradeoff(ctx, points_path):
    """Plot how two attribute scores move as the transform weights are swept."""
    if points_path:
        points, labels = load_tradeoff(points_path)
        out = Path(ctx.output_dir or Path(points_path).parent) / "plots" / "tradeoff.png"
    else:
        cfg = ctx.config()
        sw = cfg.sweep
        if not sw.get("transforms") or not sw.get("classifiers"):
            raise ConfigError("sweep.transforms and sweep.classifiers are required")
        if len(sw["transforms"]) != 2 or len(sw["classifiers"]) != 2:
            raise ConfigError("the trade-off sweep needs exactly two transforms and two classifiers")
        grid = sw.get("alphas", [0.0, 0.25, 0.5, 0.75, 1.0])
        if len(grid) < 2:
            raise InputError("a trade-off curve needs at least two alpha points")
        out = Path(cfg.output_dir) / "plots" / "tradeoff.png"
        if ctx.dry_run:
            return _plan("plot-tradeoff", sw["transforms"], [out, out.with_suffix(".json")])
        base = _load_base(cfg)
        taus = [load_transform(t) for t in sw["transforms"]]
        classifiers = [load_classifier(c) for c in sw["classifiers"]]
        labels = sw.get("labels") or [c.name for c in classifiers]
        alphas = [(float(a), 1.0 - float(a)) for a in grid]
        points = attribute_sweep(base, taus, classifiers, alphas, cfg.decode, int(sw.get("n_sequences", 100)))
    if len(points) < 2:
        raise InputError("a trade-off curve needs at least two alpha points")
    if ctx.dry_run:
        return _plan("plot-tradeoff", [points_path], [out, out.with_suffix(".json")])
    png, side = plot_tradeoff(points, labels, out)
    click.echo(f"plot-tradeoff: wrote {png} and {side}")


@cli.command("toy-setup")
@click.option("--corpus-size", type=int, default=3000, help="Pretraining sentences.")
@click.option("--epochs", type=int, default=12, help="Pretraining epochs.")
@click.option("--hidden-dim", type=int, default=32)
@click.option("--guider-sentences", type=int, default=800, help="Sentences per attribute class.")
@click.pass_obj
def cmd_toy_setup(ctx, corpus_size, epochs, hidden_dim, guider_sentences):
    """Create a self-contained toy experiment on the synthetic two-attribute language.

    Writes one shared base model, a directory with corpora, prompts and a
    config per attribute, and a ``sweep.yaml`` that combines the two
    attributes' CHRT_12 transforms.
    """
    from . import toy

    out = Path(ctx.output_dir or "toy_experiment")
    seed = 2 if ctx.seed is None else ctx.seed
    if ctx.dry_run:
        return _plan("toy-setup", [], [out / "base.npz", *(out / a / "config.yaml" for a in toy.ATTRIBUTES),
                                       out / "sweep.yaml"])
    out.mkdir(parents=True, exist_ok=True)
    settings = toy.ToySettings(hidden_dim=hidden_dim, corpus_size=corpus_size, epochs=epochs)
    base, _ = toy.pretrain_toy_lm(seed, settings)
    save_model(out / "base.npz", base, extra={"toy_settings": vars(settings), "seed": seed})
    block = settings.max_positions
    for attribute in toy.ATTRIBUTES:
        adir = out / attribute
        adir.mkdir(exist_ok=True)
        pos, neg = toy.attribute_corpora(attribute, guider_sentences, seed=1 + 10 * seed)
        (adir / "positive.txt").write_text("\n".join(pos) + "\n")
        (adir / "negative.txt").write_text("\n".join(neg) + "\n")
        (adir / "raw_corpus.txt").write_text("\n".join(toy.make_corpus(400, seed=500 + seed)) + "\n")
        prompts = [" ".join(s.split()[:5]) for s in toy.make_corpus(20, seed=99 + seed, fixed={attribute: 1})]
        (adir / "prompts.txt").write_text("\n".join(prompts) + "\n")
        config = {
            "base_model": "../base.npz", "attribute": attribute, "seed": seed, "output_dir": "runs",
            "corpora": {"positive": "positive.txt", "negative": "negative.txt"},
            "chrt_variants": [[2, 1], [1, 1], [1, 2]],
            "finetune": {"epochs": 3, "learning_rate": 3e-3, "batch_size": 16, "block_size": block},
            "chrt": {"epochs": 10, "learning_rate": 3e-3, "batch_size": 16, "block_size": block},
            "transform": {"kappa": 0.5, "num_blocks": 2, "activation": "gelu"},
            "decode": {"top_p": 0.8, "repetition_penalty": 1.2, "max_new_tokens": 25, "num_return": 25},
            "eval": {"classifier": f"toy:{attribute}", "scorer": "base", "threshold": 0.5},
            "prompts": "prompts.txt",
            "dataset": {"corpus": "raw_corpus.txt", "n": 20, "theta": 0.9, "min_len": 40, "max_len": 1024,
                        "classifier": f"toy:{attribute}"},
            "benchmark": {"runs": 100, "warmup": 3, "prompt": ""},
        }
        (adir / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False))
    names = list(toy.ATTRIBUTES)
    sweep = {"base_model": "base.npz", "seed": seed, "output_dir": "sweep",
             "sweep": {"transforms": [f"{a}/runs/chrt/CHRT_12/tau.npz" for a in names],
                       "classifiers": [f"toy:{a}" for a in names], "labels": names,
                       "alphas": [0.0, 0.25, 0.5, 0.75, 1.0], "n_sequences": 100}}
    (out / "sweep.yaml").write_text(yaml.safe_dump(sweep, sort_keys=False))
    click.echo(f"toy-setup: wrote experiment to {out}")


def run(argv=None):
    """Invoke the CLI and translate failures into exit codes."""
    try:
        rv = cli.main(args=argv, prog_name="reprsteer", standalone_mode=False)
        return rv if isinstance(rv, int) else EXIT_OK
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except click.exceptions.Abort:
        return EXIT_RUNTIME
    except (ConfigError, InputError) as exc:
        click.echo(f"config error: {exc}", err=True)
        return EXIT_CONFIG
    except DependencyError as exc:
        click.echo(f"dependency error: {exc}", err=True)
        return EXIT_DEPENDENCY
    except (NumericError, ContractError, PartialResultError, BenchmarkAborted, RuntimeError, OSError,
            ArithmeticError) as exc:
        click.echo(f"runtime error: {exc}", err=True)
        return EXIT_RUNTIME
    except Exception as exc:
        log.debug("unexpected failure", exc_info=True)
        click.echo(f"runtime error: {type(exc).__name__}: {exc}", err=True)
        return EXIT_RUNTIME


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
