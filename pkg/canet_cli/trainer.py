#!/usr/bin/env python3
"""
Trainer
Boucle d'entraînement (patchs dégradés à la volée, perte L2, Adam),
boucle d'évaluation et protocoles expérimentaux (sur-apprentissage,
ablations).

Un même triplet (données, configuration, graine) produit des checkpoints
et des journaux identiques au bit près.
"""

import json
import logging
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from canet_cli.canet import ModelConfig, canet_forward, read_checkpoint, restore_image, save_checkpoint
from canet_cli.errors import ConfigError, ContractError, TrainingDivergedError
from canet_cli.imaging import DegradationTask, ImageBuffer, derive_seed, extract_patches, load_image_dir, quantize
from canet_cli.metrics import ImageMetrics, MetricReport, psnr, ssim
from canet_cli.nn import AdamConfig, ParameterSet, adam_step, init_params, l2_loss
from canet_cli.tensor import Graph, Tensor

logger = logging.getLogger(__name__)

NamedImages = Sequence[Tuple[str, ImageBuffer]]
Batch = Tuple[np.ndarray, np.ndarray]

LOG_FILE = "train_log.jsonl"
DIVERGENCE_FILE = "divergence.json"
BEST_CHECKPOINT = "best.cant"
LAST_CHECKPOINT = "last.cant"


@dataclass
class TrainConfig:
    """
    Configuration d'entraînement

    Le fichier JSON reprend exactement ces clés, avec un objet `model`
    imbriqué pour ModelConfig.
    """
    task: str = "awgn"
    sigma: float = 25.0
    quality: int = 10
    subsample: bool = True
    batch_size: int = 16
    steps: int = 1000
    lr: float = 1e-4
    seed: int = 0
    eval_every: int = 100
    patch_size: int = 48
    patches_per_image: int = 16
    augment: bool = False
    resample_noise: bool = True
    clip_norm: Optional[float] = None
    checkpoint_dir: Optional[str] = None
    eval_data: Optional[str] = None
    prefetch: int = 0
    tile: int = 48
    overlap: int = 8
    model: ModelConfig = field(default_factory=ModelConfig)

    def degradation(self) -> DegradationTask:
        return DegradationTask(kind=self.task, sigma=self.sigma, quality=self.quality, subsample=self.subsample)

    def adam(self) -> AdamConfig:
        return AdamConfig(lr=self.lr, clip_norm=self.clip_norm)

    def validate(self) -> List[str]:
        errors = []
        if self.steps < 1:
            errors.append(f"steps doit être > 0 (reçu {self.steps})")
        if self.batch_size < 1:
            errors.append(f"batch_size doit être >= 1 (reçu {self.batch_size})")
        if self.eval_every < 1:
            errors.append(f"eval_every doit être >= 1 (reçu {self.eval_every})")
        if self.patch_size < 1 or self.patches_per_image < 1:
            errors.append("patch_size et patches_per_image doivent être >= 1")
        if self.prefetch < 0:
            errors.append(f"prefetch doit être >= 0 (reçu {self.prefetch})")
        if self.overlap < 0 or self.tile <= 2 * self.overlap:
            errors.append(f"tuile {self.tile} incompatible avec le recouvrement {self.overlap}")
        errors.extend(self.degradation().validate())
        errors.extend(self.adam().validate())
        errors.extend(self.model.validate())
        return errors

    def check(self) -> None:
        errors = self.validate()
        if errors:
            raise ConfigError("TrainConfig invalide: " + "; ".join(errors))

    def to_dict(self) -> Dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "model"}
        data["model"] = self.model.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TrainConfig":
        data = dict(data)
        model = data.pop("model", None)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"Clés de configuration inconnues: {', '.join(unknown)}")
        return cls(**data, model=ModelConfig() if model is None else ModelConfig.from_dict(model))

    def with_overrides(self, **overrides: Any) -> "TrainConfig":
        """Copie où chaque valeur non None remplace le champ correspondant"""
        return replace(self, **{key: value for key, value in overrides.items() if value is not None})


def load_config(source: Optional[str]) -> TrainConfig:
    """
    Charge une configuration depuis un nom de préréglage ou un fichier JSON

    Args:
        source: `default`, `tiny`, chemin d'un fichier JSON ou None

    Returns:
        TrainConfig: Valeurs par défaut complétées par la source
    """
    if source is None or source == "default":
        return TrainConfig()
    if source == "tiny":
        return TrainConfig(model=ModelConfig.preset("tiny"))
    path = Path(source)
    if not path.is_file():
        raise ConfigError(f"Configuration introuvable: {source} (préréglage default/tiny ou fichier JSON)")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"JSON invalide dans {source}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: un objet JSON est attendu")
    return TrainConfig.from_dict(data)


# ---------------------------------------------------------------------------
# Journal
# ---------------------------------------------------------------------------

@dataclass
class LossRecord:
    step: int
    loss: float


@dataclass
class EvalRecord:
    step: int
    psnr: float
    ssim: float


@dataclass
class TrainLog:
    """Pertes par pas et évaluations périodiques, indices de pas croissants"""
    losses: List[LossRecord] = field(default_factory=list)
    evals: List[EvalRecord] = field(default_factory=list)
    wall_time: float = field(default=0.0, compare=False)
    sink: Optional[Path] = field(default=None, compare=False, repr=False)

    def attach(self, path: Union[str, Path]) -> None:
        """Ouvre un fichier JSON-lines vidé puis alimenté à chaque enregistrement"""
        self.sink = Path(path)
        self.sink.write_text("", encoding="utf-8")

    def _emit(self, record: Dict[str, Any]) -> None:
        if self.sink is not None:
            with self.sink.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(record, sort_keys=True) + "\n")

    def record_loss(self, step: int, loss: float) -> None:
        if self.losses and step <= self.losses[-1].step:
            raise ContractError(f"Pas {step} non croissant (dernier: {self.losses[-1].step})")
        self.losses.append(LossRecord(step, loss))
        self._emit({"kind": "loss", "step": step, "loss": loss})

    def record_eval(self, step: int, psnr_db: float, ssim_value: float) -> None:
        if self.evals and step <= self.evals[-1].step:
            raise ContractError(f"Évaluation au pas {step} non croissante")
        self.evals.append(EvalRecord(step, psnr_db, ssim_value))
        self._emit({"kind": "eval", "step": step, "psnr": psnr_db, "ssim": ssim_value})

    @property
    def initial_loss(self) -> Optional[float]:
        return self.losses[0].loss if self.losses else None

    @property
    def final_loss(self) -> Optional[float]:
        return self.losses[-1].loss if self.losses else None

    def best_eval(self) -> Optional[EvalRecord]:
        return max(self.evals, key=lambda record: record.psnr, default=None)


@dataclass
class TrainedModel:
    """Résultat d'un entraînement"""
    params: ParameterSet
    config: ModelConfig
    checkpoint: Optional[Path] = None
    best_psnr: Optional[float] = None


# ---------------------------------------------------------------------------
# Données
# ---------------------------------------------------------------------------

def to_batch(rasters: Sequence[np.ndarray]) -> np.ndarray:
    """Empile des rasters (h, w, c) 0-255 en un batch (n, c, h, w) dans [0, 1]"""
    return np.stack([raster.transpose(2, 0, 1) for raster in rasters]) / 255.0


def build_patch_pool(images: Sequence[ImageBuffer], cfg: TrainConfig) -> List[np.ndarray]:
    """Découpe patches_per_image patchs propres par image (graine = seed ⊕ index)"""
    pool: List[np.ndarray] = []
    for index, image in enumerate(images):
        patches = extract_patches(
            (image, image),
            size=cfg.patch_size,
            count=cfg.patches_per_image,
            seed=derive_seed(cfg.seed, index),
            augment=cfg.augment,
        )
        pool.extend(patch.clean for patch in patches)
    return pool


def patch_seed(*entropy: int) -> int:
    return int(np.random.SeedSequence([int(value) for value in entropy]).generate_state(1)[0])


class BatchLoader:
    """
    Fournit le batch d'un pas donné

    Le contenu ne dépend que du pas : ordre de parcours mélangé par époque,
    graine de dégradation propre à chaque patch.
    """

    def __init__(self, pool: Sequence[np.ndarray], cfg: TrainConfig):
        if not pool:
            raise ConfigError("Aucun patch d'entraînement: images plus petites que patch_size ?")
        self.pool = pool
        self.cfg = cfg
        self.task = cfg.degradation()
        self._orders: Dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def _order(self, epoch: int) -> np.ndarray:
        with self._lock:
            if epoch not in self._orders:
                self._orders[epoch] = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.pool))
            return self._orders[epoch]

    def indices(self, step: int) -> List[int]:
        size = len(self.pool)
        first = (step - 1) * self.cfg.batch_size
        return [int(self._order(pos // size)[pos % size]) for pos in range(first, first + self.cfg.batch_size)]

    def batch(self, step: int) -> Batch:
        clean, degraded = [], []
        for slot, index in enumerate(self.indices(step)):
            if self.cfg.resample_noise:
                seed = patch_seed(self.cfg.seed, step, slot)
            else:
                seed = patch_seed(self.cfg.seed, index)
            patch = self.pool[index]
            clean.append(patch)
            degraded.append(self.task.apply(patch, seed))
        return to_batch(clean), to_batch(degraded)


def iterate_batches(loader: BatchLoader, steps: int, prefetch: int = 0) -> Iterator[Tuple[int, Batch]]:
    """
    Itère sur les batches des pas 1..steps

    Avec prefetch > 0, un thread prépare les batches à l'avance dans une
    file bornée ; l'ordre de consommation reste celui des pas.
    """
    if prefetch <= 0:
        for step in range(1, steps + 1):
            yield step, loader.batch(step)
        return

    buffer: "queue.Queue[Any]" = queue.Queue(maxsize=prefetch)
    stop = threading.Event()
    done = object()

    def _put(item: Any) -> bool:
        while not stop.is_set():
            try:
                buffer.put(item, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def _produce() -> None:
        try:
            for step in range(1, steps + 1):
                if not _put((step, loader.batch(step))):
                    return
        except Exception as exc:
            _put(exc)
            return
        _put(done)

    worker = threading.Thread(target=_produce, name="canet-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = buffer.get()
            if item is done:
                break
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        worker.join(timeout=5.0)


# ---------------------------------------------------------------------------
# Entraînement
# ---------------------------------------------------------------------------

def train_step(
    params: ParameterSet,
    clean: np.ndarray,
    degraded: np.ndarray,
    model: ModelConfig,
    adam: AdamConfig,
) -> float:
    """
    Un pas : passe avant, perte L2, rétropropagation, Adam

    Les paramètres ne sont pas modifiés si la perte n'est pas finie ; les
    gradients de ce pas restent disponibles pour le diagnostic.

    Returns:
        float: Perte avant la mise à jour
    """
    graph = Graph()
    output = canet_forward(Tensor(degraded), params, model, graph)
    loss = l2_loss(output, Tensor(clean))
    value = loss.item()
    if not math.isfinite(value):
        params.zero_grad()
        with np.errstate(all="ignore"):
            graph.backward(loss)
        return value
    graph.backward(loss)
    adam_step(params, adam)
    return value


def batch_loss(params: ParameterSet, clean: np.ndarray, degraded: np.ndarray, model: ModelConfig) -> float:
    return l2_loss(canet_forward(Tensor(degraded), params, model), Tensor(clean)).item()


def _diverged(step: int, loss: float, params: ParameterSet, cfg: TrainConfig, out_dir: Optional[Path]) -> None:
    diagnostics = {
        "step": step,
        "loss": repr(loss),
        "lr": cfg.lr,
        "grad_norms": params.grad_norms(),
    }
    logger.error("Perte non finie (%r) au pas %d, lr=%g", loss, step, cfg.lr)
    if out_dir is not None:
        (out_dir / DIVERGENCE_FILE).write_text(json.dumps(diagnostics, indent=2, sort_keys=True), encoding="utf-8")
    raise TrainingDivergedError(f"Entraînement divergent au pas {step}: perte {loss!r}", diagnostics)


def train_images(
    images: Sequence[ImageBuffer],
    cfg: TrainConfig,
    eval_images: Optional[NamedImages] = None,
) -> Tuple[TrainedModel, TrainLog]:
    """
    Entraîne un modèle sur des images propres déjà chargées

    Args:
        images: Images d'entraînement
        cfg: Configuration
        eval_images: Images d'évaluation périodique (nom, image) ; None pour
                     ne pas évaluer

    Returns:
        Tuple[TrainedModel, TrainLog]
    """
    cfg.check()
    if not images:
        raise ConfigError("Aucune image d'entraînement")
    for image in images:
        if image.channels != cfg.model.in_channels:
            raise ConfigError(f"Image à {image.channels} canaux pour un modèle à {cfg.model.in_channels} canaux")

    loader = BatchLoader(build_patch_pool(images, cfg), cfg)
    params = init_params(cfg.model, cfg.seed)
    adam = cfg.adam()
    task = cfg.degradation()
    out_dir = Path(cfg.checkpoint_dir) if cfg.checkpoint_dir else None
    log = TrainLog()
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log.attach(out_dir / LOG_FILE)
    logger.info(
        "Entraînement: %d patchs, %d paramètres, %d pas, tâche %s",
        len(loader.pool), params.count(), cfg.steps, task.describe(),
    )

    best: Optional[float] = None
    best_path: Optional[Path] = None
    started = time.perf_counter()
    for step, (clean, degraded) in iterate_batches(loader, cfg.steps, cfg.prefetch):
        loss = train_step(params, clean, degraded, cfg.model, adam)
        if not math.isfinite(loss):
            _diverged(step, loss, params, cfg, out_dir)
        log.record_loss(step, loss)
        logger.debug("pas %d: perte %.6g", step, loss)

        if eval_images and (step % cfg.eval_every == 0 or step == cfg.steps):
            report = evaluate_images(eval_images, params, cfg.model, task, cfg.seed, cfg.tile, cfg.overlap)
            log.record_eval(step, report.psnr, report.ssim)
            logger.info("pas %d: psnr %.3f dB, ssim %.4f", step, report.psnr, report.ssim)
            if best is None or report.psnr > best:
                best = report.psnr
                if out_dir is not None:
                    best_path = out_dir / BEST_CHECKPOINT
                    save_checkpoint(params, cfg.model, best_path, _metadata(cfg, step, best))

    checkpoint = best_path
    if out_dir is not None:
        last_path = out_dir / LAST_CHECKPOINT
        save_checkpoint(params, cfg.model, last_path, _metadata(cfg, cfg.steps, None))
        checkpoint = checkpoint or last_path
    log.wall_time = time.perf_counter() - started
    return TrainedModel(params=params, config=cfg.model, checkpoint=checkpoint, best_psnr=best), log


def _metadata(cfg: TrainConfig, step: int, best: Optional[float]) -> Dict[str, Any]:
    return {"task": cfg.degradation().to_dict(), "step": step, "seed": cfg.seed, "psnr": best}


def train(data_dir: Union[str, Path], cfg: TrainConfig) -> Tuple[TrainedModel, TrainLog]:
    """
    Entraîne un modèle sur un répertoire d'images PPM/PGM propres

    L'évaluation périodique porte sur `cfg.eval_data` si fourni, sinon sur
    les images d'entraînement elles-mêmes.

    Raises:
        ConfigError: Répertoire vide ou configuration invalide
        TrainingDivergedError: Perte non finie (diagnostic écrit dans
                               divergence.json si checkpoint_dir est défini)
    """
    cfg.check()
    named = load_image_dir(data_dir)
    if not named:
        raise ConfigError(f"Aucune image PPM/PGM dans {data_dir}")
    eval_images = load_image_dir(cfg.eval_data) if cfg.eval_data else named
    return train_images([image for _, image in named], cfg, eval_images)


# ---------------------------------------------------------------------------
# Évaluation
# ---------------------------------------------------------------------------

def evaluate_images(
    images: NamedImages,
    params: ParameterSet,
    config: ModelConfig,
    task: DegradationTask,
    seed: int = 0,
    tile: int = 48,
    overlap: int = 8,
    workers: int = 1,
) -> MetricReport:
    """Dégrade chaque image (graine = seed ⊕ index), restaure et mesure"""
    rows = []
    for index, (name, clean) in enumerate(images):
        degraded = quantize(task.apply(clean, derive_seed(seed, index)))
        restored = restore_image(degraded, params, config, tile=tile, overlap=overlap, workers=workers)
        rows.append(ImageMetrics(
            name=name,
            psnr=psnr(restored, clean),
            ssim=ssim(restored, clean),
            degraded_psnr=psnr(degraded, clean),
            degraded_ssim=ssim(degraded, clean),
        ))
    return MetricReport.from_rows(rows)


def evaluate(
    checkpoint: Union[str, Path],
    clean_dir: Union[str, Path],
    task: Optional[DegradationTask] = None,
    seed: int = 0,
    tile: int = 48,
    overlap: int = 8,
    workers: int = 1,
) -> MetricReport:
    """
    Évalue un checkpoint sur un répertoire d'images propres

    Sans `task`, la dégradation enregistrée dans le checkpoint est reprise.

    Raises:
        ContractError: Tâche incompatible avec celle enregistrée dans le checkpoint
        ConfigError: Répertoire vide
    """
    loaded = read_checkpoint(checkpoint)
    trained = loaded.task()
    if task is None:
        task = trained or DegradationTask()
    task.check()
    if trained is not None:
        if trained.kind != task.kind:
            raise ContractError(f"Checkpoint entraîné pour {trained.kind}, évalué sur {task.kind}")
        trained_level = trained.describe()
        if trained_level != task.describe():
            logger.warning("Niveau de dégradation différent de l'entraînement: %s", trained_level)
    images = load_image_dir(clean_dir)
    if not images:
        raise ConfigError(f"Aucune image PPM/PGM dans {clean_dir}")
    return evaluate_images(images, loaded.params, loaded.config, task, seed, tile, overlap, workers)


# ---------------------------------------------------------------------------
# Protocoles
# ---------------------------------------------------------------------------

@dataclass
class OverfitResult:
    """Bilan d'un sur-apprentissage sur un batch figé"""
    initial_loss: float
    final_loss: float
    noisy_psnr: float
    restored_psnr: float
    log: TrainLog = field(repr=False)

    @property
    def loss_ratio(self) -> float:
        return self.final_loss / self.initial_loss

    @property
    def psnr_gain(self) -> float:
        return self.restored_psnr - self.noisy_psnr


def _stacked_raster(batch: np.ndarray) -> np.ndarray:
    """Batch (n, c, h, w) dans [0, 1] -> raster (n·h, w, c) 0-255 pour les métriques"""
    n, c, h, w = batch.shape
    return batch.transpose(0, 2, 3, 1).reshape(n * h, w, c) * 255.0


def overfit_protocol(
    image: ImageBuffer,
    model: Optional[ModelConfig] = None,
    steps: int = 2000,
    lr: float = 1e-3,
    patches: int = 4,
    patch_size: int = 48,
    task: Optional[DegradationTask] = None,
    seed: int = 0,
) -> OverfitResult:
    """
    Sur-apprentissage d'un petit modèle sur quelques patchs figés

    Les patchs et leur dégradation sont tirés une fois pour toutes ; la
    perte doit chuter et la restauration dépasser l'entrée bruitée.

    Args:
        image: Image source des patchs
        model: Configuration (CANet-tiny par défaut)
        steps: Nombre de pas d'Adam
        lr: Taux d'apprentissage
        patches: Nombre de patchs du batch
        patch_size: Côté des patchs
        task: Dégradation (bruit σ=25 par défaut)
        seed: Graine

    Returns:
        OverfitResult
    """
    model = model or ModelConfig.preset("tiny")
    task = task or DegradationTask("awgn", sigma=25.0)
    crops = extract_patches((image, image), size=patch_size, count=patches, seed=seed)
    if not crops:
        raise ConfigError(f"Image trop petite pour des patchs {patch_size}×{patch_size}")
    clean = to_batch([crop.clean for crop in crops])
    degraded = to_batch([
        task.apply(crop.clean, derive_seed(seed, index)) for index, crop in enumerate(crops)
    ])

    params = init_params(model, seed)
    adam = AdamConfig(lr=lr)
    log = TrainLog()
    started = time.perf_counter()
    for step in range(1, steps + 1):
        loss = train_step(params, clean, degraded, model, adam)
        if not math.isfinite(loss):
            raise TrainingDivergedError(f"Sur-apprentissage divergent au pas {step}", {"step": step, "lr": lr})
        log.record_loss(step, loss)
    final = batch_loss(params, clean, degraded, model)
    log.wall_time = time.perf_counter() - started

    restored = canet_forward(Tensor(degraded), params, model).data.astype(np.float64)
    reference = _stacked_raster(clean)
    restored_raster = quantize(_stacked_raster(np.clip(restored, 0.0, 1.0))).to_float()
    return OverfitResult(
        initial_loss=log.losses[0].loss,
        final_loss=final,
        noisy_psnr=psnr(_stacked_raster(degraded), reference),
        restored_psnr=psnr(restored_raster, reference),
        log=log,
    )


ABLATIONS = ("components", "blocks")


def ablation_variants(kind: str, base: Optional[ModelConfig] = None) -> List[Tuple[str, ModelConfig]]:
    """
    Variantes d'ablation

    `components` : combinaison élément par élément, + concaténation,
    + sélection de caractéristiques, + attention.
    `blocks` : 1 à 5 A-blocks.
    """
    base = base or ModelConfig.preset("tiny")
    if kind == "components":
        return [
            ("element-wise", replace(base, combine="add", feature_selection=False, feature_attention=False)),
            ("+concatenation", replace(base, combine="concat", feature_selection=False, feature_attention=False)),
            ("+feature-selection", replace(base, combine="concat", feature_selection=True, feature_attention=False)),
            ("+feature-attention", replace(base, combine="concat", feature_selection=True, feature_attention=True)),
        ]
    if kind == "blocks":
        return [(f"{blocks}-blocks", replace(base, blocks=blocks)) for blocks in range(1, 6)]
    raise ConfigError(f"Ablation inconnue: {kind} ({', '.join(ABLATIONS)})")


@dataclass
class AblationRecord:
    name: str
    params: int
    initial_loss: float
    final_loss: float
    noisy_psnr: float
    restored_psnr: float
    wall_time: float = field(compare=False)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def run_ablation(
    kind: str,
    image: ImageBuffer,
    steps: int = 2000,
    lr: float = 1e-3,
    seed: int = 0,
    base: Optional[ModelConfig] = None,
    task: Optional[DegradationTask] = None,
) -> List[AblationRecord]:
    """Exécute le protocole de sur-apprentissage pour chaque variante"""
    records = []
    for name, config in ablation_variants(kind, base):
        logger.info("Ablation %s: variante %s (%d paramètres)", kind, name, config.param_count())
        result = overfit_protocol(image, model=config, steps=steps, lr=lr, task=task, seed=seed)
        records.append(AblationRecord(
            name=name,
            params=config.param_count(),
            initial_loss=result.initial_loss,
            final_loss=result.final_loss,
            noisy_psnr=result.noisy_psnr,
            restored_psnr=result.restored_psnr,
            wall_time=result.log.wall_time,
        ))
    return records
