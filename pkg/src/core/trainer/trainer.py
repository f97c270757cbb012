"""
学習ループ

各反復: 拡張 → 正規化 → 順伝播 → 合成損失 → 逆伝播 → Poly 学習率で SGD 更新。
サンプル毎の乱数は (seed, epoch, サンプル番号) から作るため、結果はワーカー数に依存しない。
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.core.data.augment import AugmentConfig, augment
from src.core.data.sample import normalize
from src.core.evaluator.evaluator import evaluate
from src.core.model.config import ModelConfig
from src.core.model.network import CDLinkNet, build_model, total_loss
from src.core.tensor.autograd import Tape, Tensor, backward
from src.core.trainer.checkpoint import read_checkpoint, restore_model, save_checkpoint
from src.core.trainer.optimizer import MomentumSGD, poly_lr
from src.monitor.monitor import Monitor
from src.scheduler.worker_pool import Worker_Pool
from src.utils.error_logger import Error_Logger
from src.utils.logger import get_logger

logger = get_logger(__name__)


class TrainingDivergedError(ValueError):
    """損失が非有限になった"""

    def __init__(self, message: str, sample_seeds: List[Tuple[int, int, int]]):
        self.sample_seeds = sample_seeds
        super().__init__(message)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.002
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    epochs: int = 30
    seed: int = 0
    ignore_value: int = 255
    checkpoint_every: int = 0
    eval_train: bool = False
    resume: str = ""

    def violations(self) -> List[str]:
        problems = []
        if self.base_lr <= 0:
            problems.append(f"base_lr は正である必要があります: {self.base_lr}")
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum は 0 以上 1 未満である必要があります: {self.momentum}")
        if self.batch_size < 1:
            problems.append(f"batch_size は1以上である必要があります: {self.batch_size}")
        if self.epochs < 0:
            problems.append(f"epochs は0以上である必要があります: {self.epochs}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay は0以上である必要があります: {self.weight_decay}")
        if self.lr_power <= 0:
            problems.append(f"lr_power は正である必要があります: {self.lr_power}")
        return problems


@dataclass
class TrainResult:
    model: CDLinkNet
    losses: List[float] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    metrics_file: Optional[Path] = None
    history: List[Dict[str, object]] = field(default_factory=list)


class Seg_Trainer:
    """C-DLinkNet の学習"""

    def __init__(
        self,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        dataset,
        output_dir: str,
        augment_cfg: Optional[AugmentConfig] = None,
        val_dataset=None,
        workers: int = 1,
        error_logger: Optional[Error_Logger] = None,
    ):
        """初期化

        Args:
            model_cfg: モデル構成
            train_cfg: 学習設定
            dataset: 学習データ（len と添字、class_table を持つ）
            output_dir: チェックポイントとメトリクスログの出力先
            augment_cfg: 拡張設定（None なら既定値、切り出しサイズは model_cfg.input_hw）
            val_dataset: エポック毎に評価するデータ
            workers: バッチ組み立ての並列数
            error_logger: エラー記録先
        """
        problems = train_cfg.violations()
        if problems:
            raise ValueError("学習設定が不正です: " + "; ".join(problems))
        if len(dataset) == 0:
            raise ValueError("学習データが空です")
        self.model_cfg = model_cfg.validate()
        self.train_cfg = train_cfg
        self.dataset = dataset
        self.val_dataset = val_dataset
        self.table = dataset.class_table
        if self.table.num_classes != model_cfg.num_classes:
            raise ValueError(f"クラス数が一致しません: データ {self.table.num_classes}, モデル {model_cfg.num_classes}")
        self.augment_cfg = (augment_cfg or AugmentConfig(crop_hw=model_cfg.input_hw)).validate()
        self.output_dir = Path(output_dir)
        self.workers = workers
        self.error_logger = error_logger or Error_Logger()

        self.model = build_model(model_cfg, seed=train_cfg.seed)
        self.optimizer = MomentumSGD(self.model.registry, train_cfg.momentum, train_cfg.weight_decay)
        self.iters_per_epoch = math.ceil(len(dataset) / train_cfg.batch_size)
        self.max_iter = max(1, train_cfg.epochs * self.iters_per_epoch)
        self.iteration = 0

    def _sample_key(self, epoch: int, index: int) -> Tuple[int, int, int]:
        return (self.train_cfg.seed, epoch, index)

    def _prepare(self, key: Tuple[int, int, int]) -> Tuple[np.ndarray, np.ndarray]:
        _, _, index = key
        rng = np.random.default_rng(list(key))
        sample = augment(self.dataset[index], rng, self.augment_cfg, self.table)
        return normalize(sample.image).data, sample.labels

    def epoch_order(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.train_cfg.seed, epoch]).permutation(len(self.dataset))

    def _resume(self) -> int:
        archive = read_checkpoint(self.train_cfg.resume)
        restore_model(self.model, archive)
        self.optimizer.load_state(archive.velocities())
        iteration = archive.iteration or 0
        start_epoch = iteration // self.iters_per_epoch
        if iteration % self.iters_per_epoch:
            logger.warning("再開はエポック単位です。途中の反復は破棄します",
                           extra={"iteration": iteration, "start_epoch": start_epoch})
        self.iteration = start_epoch * self.iters_per_epoch
        logger.info("学習を再開します", extra={"resume": self.train_cfg.resume, "start_epoch": start_epoch})
        return start_epoch

    def _checkpoint(self, name: str) -> Path:
        return save_checkpoint(self.model, self.output_dir / "checkpoints" / name,
                               velocity=self.optimizer.state(), iteration=self.iteration)

    def train_step(self, batch_keys: List[Tuple[int, int, int]], pool: Worker_Pool, epoch: int) -> Tuple[float, float]:
        """1反復（バッチ組み立て・順逆伝播・更新）を実行し (損失, 学習率) を返す"""
        prepared = pool.map(self._prepare, batch_keys)
        x = Tensor(np.concatenate([image for image, _ in prepared], axis=0))
        labels = np.stack([lab for _, lab in prepared], axis=0)
        lr = poly_lr(self.iteration, self.max_iter, self.train_cfg.base_lr, self.train_cfg.lr_power)

        self.model.train()
        self.model.zero_grad()
        with Tape() as tape:
            outputs = self.model(x)
            loss = total_loss(outputs, labels, self.train_cfg.ignore_value, self.model_cfg.aux_loss_weight)
        value = loss.item()
        if not math.isfinite(value):
            details = {"epoch": epoch, "iteration": self.iteration, "loss": str(value),
                       "sample_seeds": [list(k) for k in batch_keys]}
            self.error_logger.log_error("NONFINITE_LOSS", "損失が非有限になりました", details)
            raise TrainingDivergedError(f"反復 {self.iteration} で損失が非有限です: {value}", list(batch_keys))
        backward(loss, tape)
        self.optimizer.step(lr)
        self.iteration += 1
        return value, lr

    def run(self) -> TrainResult:
        """全エポックを学習し、最終チェックポイントを保存する"""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        monitor = Monitor(str(self.output_dir / "metrics.jsonl"))
        start_epoch = self._resume() if self.train_cfg.resume else 0
        losses: List[float] = []
        logger.info("学習開始", extra={"epochs": self.train_cfg.epochs, "samples": len(self.dataset),
                                      "batch_size": self.train_cfg.batch_size, "max_iter": self.max_iter,
                                      "variant": self.model.variant_name, "workers": self.workers})

        with Worker_Pool(self.workers) as pool:
            for epoch in range(start_epoch, self.train_cfg.epochs):
                order = self.epoch_order(epoch)
                for start in range(0, len(order), self.train_cfg.batch_size):
                    keys = [self._sample_key(epoch, int(i)) for i in order[start:start + self.train_cfg.batch_size]]
                    iteration = self.iteration
                    loss, lr = self.train_step(keys, pool, epoch)
                    losses.append(loss)
                    monitor.log_metrics({"iter": iteration, "epoch": epoch, "lr": lr, "loss": loss})

                record = {"iter": self.iteration, "epoch": epoch, "split": "epoch_end",
                          "loss": float(np.mean(losses[-self.iters_per_epoch:]))}
                if self.val_dataset is not None and len(self.val_dataset):
                    record["val"] = evaluate(self.model, self.val_dataset, workers=self.workers).summary()
                if self.train_cfg.eval_train:
                    record["train"] = evaluate(self.model, self.dataset, workers=self.workers).summary()
                self.model.train()
                monitor.log_metrics(record)
                every = self.train_cfg.checkpoint_every
                if every and (epoch + 1) % every == 0:
                    self._checkpoint(f"epoch_{epoch + 1:04d}.ckpt")

        final = self._checkpoint("final.ckpt")
        logger.info("学習完了", extra={"iterations": self.iteration, "checkpoint": str(final)})
        return TrainResult(self.model, losses, final, Path(monitor.metrics_file), monitor.records)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, dataset, output_dir: str, **kwargs) -> TrainResult:
    """Seg_Trainer を構築して学習する"""
    return Seg_Trainer(model_cfg, train_cfg, dataset, output_dir, **kwargs).run()
