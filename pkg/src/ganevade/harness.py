"""Experiment orchestration: synthetic corpora, pipeline stages, reports.

Stages communicate through files under a working directory so each CLI
subcommand can run alone, and a full pipeline run is reproducible from the
config plus the global seed. Evaluation always re-extracts features from
the rewritten files on disk, never from in-memory adversarial vectors.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, detectors, features, gan, padopt, petk
from . import __version__

SCHEMA_VERSION = 1
CACHE_ENV_VAR = "GANEVADE_CACHE_DIR"

GAN_KINDS = ("byte_histogram", "api", "strings")
FAMILIES = ("byte", "api_topk", "api_hashed", "strings_topk", "strings_hashed")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage


# --- configuration ----------------------------------------------------------

def _default_byte_alpha(kind: str) -> list[float]:
    alpha = np.full(256, 0.3)
    if kind == "benign":
        alpha[0x20:0x80] = 6.0      # printable-heavy, text-like content
    else:
        alpha[0x80:] = 6.0          # high-byte heavy content
    return alpha.tolist()


def _default_api_pools() -> dict:
    benign = [f"oslib{i % 12:02d}.dll!service{i:03d}" for i in range(120)]
    malicious = [f"shady{i % 8:02d}.dll!payload{i:03d}" for i in range(60)]
    shared = [f"common{i % 4:02d}.dll!util{i:03d}" for i in range(30)]
    # long tail of rare benign imports: individually below any Top-K cut,
    # collectively visible to the hashed representation
    tail = [f"vendor{i % 40:02d}.dll!ext{i:03d}" for i in range(400)]
    return {
        "benign": {"tokens": benign, "p_benign": 0.35, "p_malicious": 0.05},
        "malicious": {"tokens": malicious, "p_benign": 0.02, "p_malicious": 0.4},
        "shared": {"tokens": shared, "p_benign": 0.5, "p_malicious": 0.5},
        "benign_tail": {"tokens": tail, "p_benign": 0.25, "p_malicious": 0.0},
    }


def _default_string_pools() -> dict:
    benign = [f"product-release-note-{i:03d}" for i in range(150)]
    malicious = [f"exfil-beacon-target-{i:03d}" for i in range(80)]
    shared = [f"shared-runtime-msg-{i:03d}" for i in range(40)]
    tail = [f"locale-resource-entry-{i:03d}" for i in range(400)]
    return {
        "benign": {"tokens": benign, "p_benign": 0.35, "p_malicious": 0.05},
        "malicious": {"tokens": malicious, "p_benign": 0.02, "p_malicious": 0.4},
        "shared": {"tokens": shared, "p_benign": 0.5, "p_malicious": 0.5},
        "benign_tail": {"tokens": tail, "p_benign": 0.25, "p_malicious": 0.0},
    }


@dataclass
class CorpusConfig:
    kind: str = "synthetic"                 # synthetic | dirs
    n_per_class: int = 100
    content_size: tuple = (1024, 4096)
    byte_alpha_benign: list = field(default_factory=lambda: _default_byte_alpha("benign"))
    byte_alpha_malicious: list = field(default_factory=lambda: _default_byte_alpha("malicious"))
    api_pools: dict = field(default_factory=_default_api_pools)
    string_pools: dict = field(default_factory=_default_string_pools)
    benign_dir: str | None = None
    malicious_dir: str | None = None


@dataclass
class FeatureConfig:
    k_api: int = 150
    k_strings: int = 200
    hash_dim: int = 1280
    min_string_len: int = 5


@dataclass
class GanStageConfig:
    max_steps: int = 3000
    batch_size: int = 64
    lambda_gp: float = 10.0
    n_generator: int = 5
    learning_rate: float = 1e-4
    generator_hidden: list | None = None    # None: size-appropriate default
    critic_hidden: list | None = None


@dataclass
class DetectorSpec:
    name: str
    kind: str = "logreg"                    # logreg | mlp
    families: tuple = ("byte",)
    hyperparams: dict = field(default_factory=dict)


def _default_detectors() -> list:
    return [
        DetectorSpec("byte_logreg", "logreg", ("byte",)),
        DetectorSpec("api_topk_logreg", "logreg", ("api_topk",)),
        DetectorSpec("api_hashed_logreg", "logreg", ("api_hashed",)),
        DetectorSpec("strings_topk_logreg", "logreg", ("strings_topk",)),
        DetectorSpec("strings_hashed_logreg", "logreg", ("strings_hashed",)),
        DetectorSpec("multimodal_v1", "logreg", ("byte", "api_hashed")),
        DetectorSpec("multimodal_v2", "logreg",
                     ("byte", "api_hashed", "strings_hashed")),
    ]


DEFAULT_GAP_SWEEP = (0.01, 0.008, 0.005, 0.003, 0.001, 0.0008, 0.0005,
                     0.0003, 0.0001)


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    feature_cfg: FeatureConfig = field(default_factory=FeatureConfig)
    gans: dict = field(default_factory=lambda: {
        "byte_histogram": GanStageConfig(max_steps=3000),
        "api": GanStageConfig(max_steps=300),
        "strings": GanStageConfig(max_steps=300),
    })
    detectors: list = field(default_factory=_default_detectors)
    attacks: list = field(default_factory=lambda: [
        "gan_byte", "gan_api", "gan_strings", "benign_injection",
        "malgan_byte"])
    split: tuple = (0.8, 0.1, 0.1)
    gap: float = 0.001
    gap_sweep: tuple = DEFAULT_GAP_SWEEP
    sweep_subsample: int = 200
    sweep_seed: int | None = None           # defaults to seed + 1, recorded
    max_new_imports: int = 2048
    max_new_strings: int = 4096
    malgan_max_queries: int = 50_000
    seed: int = 0

    def __post_init__(self):
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")
        for attack in self.attacks:
            if attack not in ("gan_byte", "gan_api", "gan_strings", "gan_all",
                              "benign_injection", "malgan_byte", "malgan_api"):
                raise ConfigError(f"unknown attack {attack!r}")
        for spec in self.detectors:
            for fam in spec.families:
                if fam not in FAMILIES:
                    raise ConfigError(f"unknown feature family {fam!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {version}")
        try:
            if "corpus" in d:
                d["corpus"] = CorpusConfig(**d["corpus"])
            if "feature_cfg" in d:
                d["feature_cfg"] = FeatureConfig(**d["feature_cfg"])
            if "gans" in d:
                d["gans"] = {k: GanStageConfig(**v) if isinstance(v, dict) else v
                             for k, v in d["gans"].items()}
            if "detectors" in d:
                d["detectors"] = [
                    DetectorSpec(**{**s, "families": tuple(s["families"])})
                    if isinstance(s, dict) else s for s in d["detectors"]]
            for key in ("split", "gap_sweep"):
                if key in d:
                    d[key] = tuple(d[key])
            if "corpus" in d and isinstance(d["corpus"].content_size, list):
                d["corpus"].content_size = tuple(d["corpus"].content_size)
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return ExperimentConfig.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def default_workdir() -> Path:
    return Path(os.environ.get(CACHE_ENV_VAR, ".ganevade"))


# --- synthetic corpus -------------------------------------------------------

def _sample_tokens(pools: dict, label: str, rng: np.random.Generator) -> list[str]:
    picked = []
    for pool in pools.values():
        p = pool["p_benign"] if label == "benign" else pool["p_malicious"]
        mask = rng.random(len(pool["tokens"])) < p
        picked.extend(tok for tok, hit in zip(pool["tokens"], mask) if hit)
    return picked


def _sample_content(alpha: np.ndarray, size: int, rng: np.random.Generator) -> bytes:
    dist = rng.dirichlet(alpha)
    counts = rng.multinomial(size, dist)
    values = np.repeat(np.arange(256, dtype=np.uint8), counts)
    return rng.permutation(values).tobytes()


def gen_corpus(cfg: CorpusConfig, seed: int, out_dir) -> dict:
    """Write a labeled synthetic PE corpus; same seed, same bytes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lo, hi = cfg.content_size
    records = []
    for label, alpha in (("benign", np.asarray(cfg.byte_alpha_benign)),
                         ("malicious", np.asarray(cfg.byte_alpha_malicious))):
        for i in range(cfg.n_per_class):
            content = _sample_content(alpha, int(rng.integers(lo, hi + 1)), rng)
            imports = _sample_tokens(cfg.api_pools, label, rng)
            strings = _sample_tokens(cfg.string_pools, label, rng)
            spec = petk.SynthSpec(
                sections=[petk.SectionSpec(".text", content=content)],
                imports=imports, strings=strings)
            data = petk.synth_pe(spec, seed=int(rng.integers(0, 2**31)))
            name = f"{label}_{i:05d}.exe"
            (out_dir / name).write_bytes(data)
            records.append({"name": name, "label": label})
    manifest = {"seed": seed, "files": records}
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def load_corpus(corpus_dir) -> tuple[dict, dict[str, bytes]]:
    corpus_dir = Path(corpus_dir)
    manifest = json.loads((corpus_dir / "manifest.json").read_text())
    blobs = {rec["name"]: (corpus_dir / rec["name"]).read_bytes()
             for rec in manifest["files"]}
    return manifest, blobs


def ingest_dirs(benign_dir, malicious_dir, out_dir) -> dict:
    """Build a manifest over user-supplied PE directories (files copied)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for label, src in (("benign", benign_dir), ("malicious", malicious_dir)):
        for i, path in enumerate(sorted(Path(src).iterdir())):
            if not path.is_file():
                continue
            name = f"{label}_{i:05d}.exe"
            (out_dir / name).write_bytes(path.read_bytes())
            records.append({"name": name, "label": label, "source": str(path)})
    manifest = {"seed": None, "files": records}
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


# --- feature extraction -----------------------------------------------------

@dataclass
class FileFeatures:
    name: str
    label: str
    histogram: np.ndarray
    import_tokens: set
    string_tokens: "features.Counter"


def extract_file(name: str, label: str, data: bytes,
                 fcfg: FeatureConfig) -> FileFeatures:
    hist = features.byte_histogram(data).freq
    try:
        pe = petk.parse(data, strict=False)
        imports = features.extract_imports(pe)
    except petk.PeEditError:
        imports = set()
    strings = features.extract_strings(data, fcfg.min_string_len)
    return FileFeatures(name=name, label=label, histogram=hist,
                        import_tokens=imports, string_tokens=strings)


def split_indices(labels: list[str], fractions, seed: int) -> dict[str, list[int]]:
    """Stratified, seeded train/val/test split over manifest order."""
    rng = np.random.default_rng(seed)
    out = {"train": [], "val": [], "test": []}
    for cls in ("benign", "malicious"):
        idx = [i for i, lab in enumerate(labels) if lab == cls]
        idx = list(rng.permutation(idx))
        n = len(idx)
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        out["train"].extend(int(i) for i in idx[:n_train])
        out["val"].extend(int(i) for i in idx[n_train:n_train + n_val])
        out["test"].extend(int(i) for i in idx[n_train + n_val:])
    for part in out.values():
        part.sort()
    return out


class FeatureTable:
    """Per-family matrices over a fixed file order, plus the vocabularies."""

    def __init__(self, files: list[FileFeatures], fcfg: FeatureConfig,
                 train_idx: list[int],
                 vocab_api: features.Vocabulary | None = None,
                 vocab_strings: features.Vocabulary | None = None):
        self.files = files
        self.fcfg = fcfg
        benign_train = [files[i] for i in train_idx if files[i].label == "benign"]
        if vocab_api is None:
            vocab_api = features.select_topk(
                [f.import_tokens for f in benign_train], fcfg.k_api, kind="api")
        if vocab_strings is None:
            vocab_strings = features.select_topk(
                [set(f.string_tokens) for f in benign_train], fcfg.k_strings,
                kind="string")
        self.vocab_api = vocab_api
        self.vocab_strings = vocab_strings
        self.matrices = {
            "byte": np.array([f.histogram for f in files]),
            "api_topk": np.array([features.vectorize(f.import_tokens, vocab_api)
                                  for f in files]),
            "api_hashed": np.array([features.hash_features(f.import_tokens,
                                                           fcfg.hash_dim)
                                    for f in files]),
            "strings_topk": np.array([features.vectorize(set(f.string_tokens),
                                                         vocab_strings)
                                      for f in files]),
            "strings_hashed": np.array([features.hash_features(f.string_tokens,
                                                               fcfg.hash_dim)
                                        for f in files]),
        }

    def assemble(self, spec_families, rows) -> np.ndarray:
        parts = [self.matrices[fam][rows] for fam in spec_families]
        return np.hstack(parts)

    def vector_for(self, feats: FileFeatures, spec_families) -> np.ndarray:
        parts = []
        for fam in spec_families:
            if fam == "byte":
                parts.append(feats.histogram)
            elif fam == "api_topk":
                parts.append(features.vectorize(feats.import_tokens, self.vocab_api))
            elif fam == "api_hashed":
                parts.append(features.hash_features(feats.import_tokens,
                                                    self.fcfg.hash_dim))
            elif fam == "strings_topk":
                parts.append(features.vectorize(set(feats.string_tokens),
                                                self.vocab_strings))
            elif fam == "strings_hashed":
                parts.append(features.hash_features(feats.string_tokens,
                                                    self.fcfg.hash_dim))
        return np.concatenate(parts)


# --- GAN wiring -------------------------------------------------------------

def pipeline_preset(kind: str, dim: int, stage_cfg: GanStageConfig) -> gan.GanPreset:
    """Canonical preset when dims match it, else a size-appropriate variant."""
    canonical = gan.preset_for(kind)
    if dim == canonical.input_dim and stage_cfg.generator_hidden is None \
            and stage_cfg.critic_hidden is None:
        return canonical
    gen_hidden = tuple(stage_cfg.generator_hidden or
                       (max(dim, 64), max(dim, 64)))
    critic_hidden = tuple(stage_cfg.critic_hidden or
                          (max(dim // 2, 32), max(dim // 4, 16)))
    return gan.GanPreset(kind, dim, canonical.noise_dim, gen_hidden,
                         critic_hidden, canonical.output_activation)


def train_gan_for(kind: str, table: FeatureTable, train_idx, cfg: ExperimentConfig,
                  metrics_path=None) -> gan.GanModel:
    family = {"byte_histogram": "byte", "api": "api_topk",
              "strings": "strings_topk"}[kind]
    labels = [table.files[i].label for i in train_idx]
    rows = np.asarray(train_idx)
    benign = table.matrices[family][rows[[l == "benign" for l in labels]]]
    malicious = table.matrices[family][rows[[l == "malicious" for l in labels]]]
    stage = cfg.gans.get(kind, GanStageConfig())
    preset = pipeline_preset(kind, benign.shape[1], stage)
    tcfg = gan.TrainingConfig(
        lambda_gp=stage.lambda_gp, n_generator=stage.n_generator,
        batch_size=stage.batch_size, learning_rate=stage.learning_rate,
        seed=cfg.seed, max_steps=stage.max_steps)
    sink = None
    rows_out = []
    if metrics_path is not None:
        def sink(step, ld, lg, gp):
            rows_out.append(f"{step},{ld!r},{lg!r},{gp!r}\n")
    model = gan.train(benign, malicious, preset, tcfg, metrics_sink=sink)
    if metrics_path is not None:
        with open(metrics_path, "w") as fh:
            fh.write("step,loss_critic,loss_generator,gradient_penalty\n")
            fh.writelines(rows_out)
    return model


# --- attacks ----------------------------------------------------------------

@dataclass
class AttackOutput:
    name: str
    rewritten: dict                 # file name -> bytes
    query_count: int = 0
    stats: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


def _pad_to_target(data: bytes, target: np.ndarray, gap, gap_is_ratio=True) -> bytes:
    counts = np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)
    if isinstance(gap, str) and gap == "exact":
        req = padopt.PaddingRequest(counts, target, gap=0.0, mode="exact")
    else:
        req = padopt.PaddingRequest(counts, target, gap=float(gap),
                                    mode="relaxed", gap_is_ratio=gap_is_ratio)
    plan = padopt.plan_for(req)
    pe = petk.parse(data, strict=False)
    return petk.append_overlay(pe, plan).data


def _safe_target(target: np.ndarray) -> np.ndarray:
    """Keep every target bin strictly positive so the exact model stays
    feasible; renormalize after flooring. The floor bounds how much the
    exact model can inflate a file (a bin with b_i counts forces a total
    of at least b_i / floor)."""
    floored = np.maximum(target, 1e-6)
    return floored / floored.sum()


def attack_gan_byte(model, test_files, blobs, gap, seed) -> AttackOutput:
    rng = np.random.default_rng(seed)
    rewritten = {}
    appended = []
    for feats in test_files:
        z = gan.sample_noise(model.preset.noise_dim, 1, rng)
        target = _safe_target(gan.generate(model, feats.histogram[None, :], z)[0])
        before = len(blobs[feats.name])
        data = _pad_to_target(blobs[feats.name], target, gap)
        rewritten[feats.name] = data
        appended.append(len(data) - before)
    return AttackOutput(name="gan_byte", rewritten=rewritten,
                        stats={"mean_appended_bytes": float(np.mean(appended))})


def attack_gan_indicator(model, test_files, blobs, table: FeatureTable,
                         kind: str, cap: int, seed) -> AttackOutput:
    vocab = table.vocab_api if kind == "api" else table.vocab_strings
    family = "api_topk" if kind == "api" else "strings_topk"
    rng = np.random.default_rng(seed)
    rewritten = {}
    warnings = []
    added_counts = []
    for feats in test_files:
        m = table.vector_for(feats, (family,))
        z = gan.sample_noise(model.preset.noise_dim, 1, rng)
        m_adv = gan.generate(model, m[None, :], z)[0]
        new = [vocab.entries[i] for i in range(vocab.size)
               if m_adv[i] > 0.5 and m[i] < 0.5]
        if len(new) > cap:
            warnings.append(f"{feats.name}: {len(new)} new tokens over cap {cap}")
            new = new[:cap]
        added_counts.append(len(new))
        pe = petk.parse(blobs[feats.name], strict=False)
        if kind == "api":
            edited, _ = petk.extend_imports(pe, new)
        else:
            payload = b"\x00" + b"\x00".join(
                s.encode("latin-1") for s in new) + b"\x00"
            edited = petk.add_section(pe, ".sdat2", payload)
        rewritten[feats.name] = edited.data
    return AttackOutput(name=f"gan_{kind}", rewritten=rewritten,
                        stats={"mean_new_tokens": float(np.mean(added_counts))},
                        warnings=warnings)


def attack_benign_injection(test_files, blobs, benign_train_blobs, seed) -> AttackOutput:
    rng = np.random.default_rng(seed)
    pool = [benign_train_blobs[k] for k in sorted(benign_train_blobs)]
    rewritten = {}
    for feats in test_files:
        pe = petk.parse(blobs[feats.name], strict=False)
        rewritten[feats.name] = baselines.benign_injection(pe, pool, rng).data
    return AttackOutput(name="benign_injection", rewritten=rewritten)


def attack_malgan_byte(table: FeatureTable, train_idx, test_files, blobs,
                       black_box, gap, cfg: ExperimentConfig) -> AttackOutput:
    labels = [table.files[i].label for i in train_idx]
    rows = np.asarray(train_idx)
    benign = table.matrices["byte"][rows[[l == "benign" for l in labels]]]
    malicious = table.matrices["byte"][rows[[l == "malicious" for l in labels]]]
    stage = cfg.gans.get("byte_histogram", GanStageConfig())
    preset = pipeline_preset("byte_histogram", benign.shape[1], stage)
    mcfg = baselines.MalganConfig(seed=cfg.seed,
                                  max_queries=cfg.malgan_max_queries)
    model = baselines.train_malgan(malicious, benign, black_box, preset, mcfg)
    rng = np.random.default_rng(cfg.seed + 2)
    rewritten = {}
    for feats in test_files:
        z = gan.sample_noise(preset.noise_dim, 1, rng)
        target = _safe_target(
            baselines.malgan_generate(model, feats.histogram[None, :], z)[0])
        rewritten[feats.name] = _pad_to_target(blobs[feats.name], target, gap)
    return AttackOutput(name="malgan_byte", rewritten=rewritten,
                        query_count=model.query_count,
                        stats={"rounds": model.training_meta.get("rounds", 0)})


# --- pipeline ---------------------------------------------------------------

@dataclass
class PipelineState:
    cfg: ExperimentConfig
    workdir: Path
    manifest: dict | None = None
    blobs: dict | None = None
    file_features: list | None = None
    splits: dict | None = None
    table: FeatureTable | None = None
    detector_models: dict = field(default_factory=dict)
    gan_models: dict = field(default_factory=dict)
    attack_outputs: dict = field(default_factory=dict)


def _stage(name):
    def wrap(fn):
        def run(state, *args, **kwargs):
            try:
                return fn(state, *args, **kwargs)
            except (ConfigError, StageError):
                raise
            except Exception as exc:
                raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        run.__name__ = fn.__name__
        return run
    return wrap


@_stage("corpus")
def stage_corpus(state: PipelineState):
    corpus_dir = state.workdir / "corpus"
    cfg = state.cfg.corpus
    if cfg.kind == "synthetic":
        if not (corpus_dir / "manifest.json").exists():
            gen_corpus(cfg, state.cfg.seed, corpus_dir)
    elif cfg.kind == "dirs":
        if cfg.benign_dir is None or cfg.malicious_dir is None:
            raise ConfigError("dirs corpus needs benign_dir and malicious_dir")
        if not (corpus_dir / "manifest.json").exists():
            ingest_dirs(cfg.benign_dir, cfg.malicious_dir, corpus_dir)
    else:
        raise ConfigError(f"unknown corpus kind {cfg.kind!r}")
    state.manifest, state.blobs = load_corpus(corpus_dir)


@_stage("extract")
def stage_extract(state: PipelineState):
    fcfg = state.cfg.feature_cfg
    files = [extract_file(rec["name"], rec["label"], state.blobs[rec["name"]], fcfg)
             for rec in state.manifest["files"]]
    state.file_features = files
    state.splits = split_indices([f.label for f in files], state.cfg.split,
                                 state.cfg.seed)
    state.table = FeatureTable(files, fcfg, state.splits["train"])
    feat_dir = state.workdir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    features.save_vocab(state.table.vocab_api, feat_dir / "vocab_api.txt")
    features.save_vocab(state.table.vocab_strings, feat_dir / "vocab_strings.txt")
    for fam, mat in state.table.matrices.items():
        features.save_matrix(mat, [f.name for f in files], feat_dir / f"{fam}.gevf")
    (feat_dir / "splits.json").write_text(json.dumps(state.splits, sort_keys=True))


@_stage("train-detector")
def stage_detectors(state: PipelineState):
    model_dir = state.workdir / "models"
    model_dir.mkdir(parents=True, exist_ok=True)
    train_idx = state.splits["train"]
    labels = [state.file_features[i].label for i in train_idx]
    b_rows = [i for i, l in zip(train_idx, labels) if l == "benign"]
    m_rows = [i for i, l in zip(train_idx, labels) if l == "malicious"]
    for spec in state.cfg.detectors:
        xb = state.table.assemble(spec.families, b_rows)
        xm = state.table.assemble(spec.families, m_rows)
        model = detectors.train_detector(
            spec.kind, detectors.FeatureSpec(tuple(spec.families)), xb, xm,
            hyperparams=spec.hyperparams, seed=state.cfg.seed)
        state.detector_models[spec.name] = model
        detectors.save_detector(model_dir / f"detector_{spec.name}.gevd", model)


@_stage("train-gan")
def stage_gans(state: PipelineState):
    model_dir = state.workdir / "models"
    model_dir.mkdir(parents=True, exist_ok=True)
    needed = set()
    for attack in state.cfg.attacks:
        if attack == "gan_byte":
            needed.add("byte_histogram")
        elif attack == "gan_api":
            needed.add("api")
        elif attack == "gan_strings":
            needed.add("strings")
        elif attack == "gan_all":
            needed.update(GAN_KINDS)
    for kind in sorted(needed):
        model = train_gan_for(kind, state.table, state.splits["train"], state.cfg,
                              metrics_path=model_dir / f"gan_{kind}_metrics.csv")
        state.gan_models[kind] = model
        gan.save_gan(model_dir / f"gan_{kind}.gevd", model)


@_stage("attack")
def stage_attacks(state: PipelineState):
    cfg = state.cfg
    test_mal = [state.file_features[i] for i in state.splits["test"]
                if state.file_features[i].label == "malicious"]
    benign_train = {state.file_features[i].name: state.blobs[state.file_features[i].name]
                    for i in state.splits["train"]
                    if state.file_features[i].label == "benign"}
    for attack in cfg.attacks:
        if attack == "gan_byte":
            out = attack_gan_byte(state.gan_models["byte_histogram"], test_mal,
                                  state.blobs, cfg.gap, cfg.seed + 10)
        elif attack == "gan_api":
            out = attack_gan_indicator(state.gan_models["api"], test_mal,
                                       state.blobs, state.table, "api",
                                       cfg.max_new_imports, cfg.seed + 11)
        elif attack == "gan_strings":
            out = attack_gan_indicator(state.gan_models["strings"], test_mal,
                                       state.blobs, state.table, "strings",
                                       cfg.max_new_strings, cfg.seed + 12)
        elif attack == "gan_all":
            out = _attack_gan_all(state, test_mal)
        elif attack == "benign_injection":
            out = attack_benign_injection(test_mal, state.blobs, benign_train,
                                          cfg.seed + 13)
        elif attack == "malgan_byte":
            target = _primary_byte_detector(state)
            out = attack_malgan_byte(state.table, state.splits["train"], test_mal,
                                     state.blobs, target.label_fn(), cfg.gap, cfg)
        else:
            raise ConfigError(f"attack {attack!r} not implemented")
        state.attack_outputs[attack] = out
        attack_dir = state.workdir / "attacks" / attack
        attack_dir.mkdir(parents=True, exist_ok=True)
        for name, data in sorted(out.rewritten.items()):
            (attack_dir / name).write_bytes(data)
        (attack_dir / "manifest.json").write_text(json.dumps({
            "attack": attack, "query_count": out.query_count,
            "stats": out.stats, "warnings": out.warnings,
            "files": sorted(out.rewritten)}, sort_keys=True, indent=1))


def _attack_gan_all(state: PipelineState, test_mal) -> AttackOutput:
    """Stack byte, API, and string modifications on each file."""
    cfg = state.cfg
    api_out = attack_gan_indicator(state.gan_models["api"], test_mal,
                                   state.blobs, state.table, "api",
                                   cfg.max_new_imports, cfg.seed + 11)
    blobs2 = dict(state.blobs)
    blobs2.update(api_out.rewritten)
    feats2 = [extract_file(f.name, f.label, blobs2[f.name], cfg.feature_cfg)
              for f in test_mal]
    str_out = attack_gan_indicator(state.gan_models["strings"], feats2, blobs2,
                                   state.table, "strings",
                                   cfg.max_new_strings, cfg.seed + 12)
    blobs3 = dict(blobs2)
    blobs3.update(str_out.rewritten)
    feats3 = [extract_file(f.name, f.label, blobs3[f.name], cfg.feature_cfg)
              for f in test_mal]
    byte_out = attack_gan_byte(state.gan_models["byte_histogram"], feats3,
                               blobs3, cfg.gap, cfg.seed + 10)
    return AttackOutput(name="gan_all", rewritten=byte_out.rewritten,
                        warnings=api_out.warnings + str_out.warnings)


def _primary_byte_detector(state: PipelineState) -> detectors.DetectorModel:
    for spec in state.cfg.detectors:
        if tuple(spec.families) == ("byte",):
            return state.detector_models[spec.name]
    raise StageError("attack", "no byte-only detector available for MalGAN")


@_stage("evaluate")
def stage_evaluate(state: PipelineState) -> dict:
    cfg = state.cfg
    fcfg = cfg.feature_cfg
    test_idx = state.splits["test"]
    test_mal = [state.file_features[i] for i in test_idx
                if state.file_features[i].label == "malicious"]
    test_ben = [state.file_features[i] for i in test_idx
                if state.file_features[i].label == "benign"]

    def rates_for(feats_list):
        out = {}
        for spec in cfg.detectors:
            model = state.detector_models[spec.name]
            x = np.array([state.table.vector_for(f, spec.families)
                          for f in feats_list])
            out[spec.name] = detectors.detection_rate(model, x)
        return out

    original_rates = rates_for(test_mal)
    fpr = {}
    for spec in cfg.detectors:
        model = state.detector_models[spec.name]
        x = np.array([state.table.vector_for(f, spec.families) for f in test_ben])
        fpr[spec.name] = detectors.false_positive_rate(model, x)

    attack_rates = {}
    query_counts = {}
    attack_stats = {}
    for attack, out in state.attack_outputs.items():
        feats_adv = [extract_file(f.name, f.label, out.rewritten[f.name], fcfg)
                     for f in test_mal]
        attack_rates[attack] = rates_for(feats_adv)
        query_counts[attack] = out.query_count
        stats = dict(out.stats)
        stats["mean_size_mb"] = float(np.mean(
            [len(out.rewritten[f.name]) for f in test_mal])) / 1e6
        stats["capacity_warnings"] = len(out.warnings)
        attack_stats[attack] = stats

    gap_rows = []
    if "gan_byte" in state.attack_outputs:
        gap_rows = _gap_sweep(state, test_mal)

    return {
        "original_rates": original_rates,
        "false_positive_rates": fpr,
        "attack_rates": attack_rates,
        "query_counts": query_counts,
        "attack_stats": attack_stats,
        "gap_sweep": gap_rows,
        "original_mean_size_mb": float(np.mean(
            [len(state.blobs[f.name]) for f in test_mal])) / 1e6,
    }


def _gap_sweep(state: PipelineState, test_mal) -> list[dict]:
    cfg = state.cfg
    sweep_seed = cfg.sweep_seed if cfg.sweep_seed is not None else cfg.seed + 1
    rng = np.random.default_rng(sweep_seed)
    subset = test_mal
    if len(test_mal) > cfg.sweep_subsample:
        pick = sorted(rng.choice(len(test_mal), size=cfg.sweep_subsample,
                                 replace=False).tolist())
        subset = [test_mal[i] for i in pick]
    model = state.gan_models["byte_histogram"]
    byte_detector = _primary_byte_detector(state)

    # one target per file, shared across every gap value
    targets = {}
    zrng = np.random.default_rng(sweep_seed + 1)
    for feats in subset:
        z = gan.sample_noise(model.preset.noise_dim, 1, zrng)
        targets[feats.name] = _safe_target(
            gan.generate(model, feats.histogram[None, :], z)[0])

    rows = []
    for gap_value in ("exact", *cfg.gap_sweep):
        sizes = []
        appended = []
        hists = []
        for feats in subset:
            # sizes and histograms follow from the plan; no need to
            # materialize the (possibly huge) exact-mode files
            blob = state.blobs[feats.name]
            counts = np.bincount(np.frombuffer(blob, dtype=np.uint8),
                                 minlength=256)
            if gap_value == "exact":
                req = padopt.PaddingRequest(counts, targets[feats.name],
                                            gap=0.0, mode="exact")
            else:
                req = padopt.PaddingRequest(counts, targets[feats.name],
                                            gap=float(gap_value))
            plan = padopt.plan_for(req)
            total = counts.sum() + plan.total_appended
            sizes.append(len(blob) + plan.total_appended)
            appended.append(plan.total_appended)
            hists.append((counts + plan.p) / total)
        rate = detectors.detection_rate(byte_detector, np.array(hists))
        rows.append({"gap": gap_value, "mean_size_mb": float(np.mean(sizes)) / 1e6,
                     "mean_appended_bytes": float(np.mean(appended)),
                     "detection_rate": rate})
    return rows


def run_pipeline(cfg: ExperimentConfig, workdir) -> dict:
    """Full run: corpus -> features -> detectors -> GANs -> attacks ->
    evaluation -> persisted report."""
    t0 = time.time()
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    state = PipelineState(cfg=cfg, workdir=workdir)
    stage_corpus(state)
    stage_extract(state)
    stage_detectors(state)
    stage_gans(state)
    stage_attacks(state)
    evaluation = stage_evaluate(state)
    report = {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "sweep_seed": cfg.sweep_seed if cfg.sweep_seed is not None else cfg.seed + 1,
        "tool_version": __version__,
        **evaluation,
        "runtime_seconds": round(time.time() - t0, 3),
    }
    (workdir / "report.json").write_text(render_report(report, "json"))
    return report


# --- report rendering -------------------------------------------------------

def report_without_runtime(report: dict) -> dict:
    return {k: v for k, v in report.items() if k != "runtime_seconds"}


def render_report(report: dict, fmt: str) -> str:
    if fmt == "json":
        return json.dumps(report, sort_keys=True, indent=1)
    if fmt == "csv":
        lines = ["detector,attack,detection_rate"]
        for det, rate in sorted(report.get("original_rates", {}).items()):
            lines.append(f"{det},original,{rate!r}")
        for attack, rates in sorted(report.get("attack_rates", {}).items()):
            for det, rate in sorted(rates.items()):
                lines.append(f"{det},{attack},{rate!r}")
        lines.append("")
        lines.append("gap,mean_size_mb,detection_rate")
        for row in report.get("gap_sweep", []):
            lines.append(f"{row['gap']},{row['mean_size_mb']!r},"
                         f"{row['detection_rate']!r}")
        return "\n".join(lines) + "\n"
    if fmt == "markdown":
        attacks = sorted(report.get("attack_rates", {}))
        lines = ["| Detector | Original | " + " | ".join(attacks) + " |",
                 "|---" * (len(attacks) + 2) + "|"]
        for det, orig in sorted(report.get("original_rates", {}).items()):
            cells = [f"{report['attack_rates'][a].get(det, float('nan')):.3f}"
                     for a in attacks]
            lines.append(f"| {det} | {orig:.3f} | " + " | ".join(cells) + " |")
        if report.get("gap_sweep"):
            lines.append("")
            lines.append("| Gap | Mean size (MB) | Detection rate |")
            lines.append("|---|---|---|")
            for row in report["gap_sweep"]:
                lines.append(f"| {row['gap']} | {row['mean_size_mb']:.3f} |"
                             f" {row['detection_rate']:.3f} |")
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown report format {fmt!r}")
