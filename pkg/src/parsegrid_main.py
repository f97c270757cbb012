#!/usr/bin/env python3
"""
parsegrid メインエントリーポイント
train / eval / infer / ablate / gradcheck / synth を設定ファイル + 上書き指定で実行する

終了コード: 0 = 成功, 1 = 設定エラー, 2 = 実行時エラー（勾配検査の不合格を含む）
"""
import argparse
import json
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

# パスの設定
sys.path.append(str(Path(__file__).parent.parent))

from src.core.data.classes import ClassTable, synth_table
from src.core.data.dataset import LipDataset, check_label_values, load_lip_dir, scan_label_values
from src.core.data.synth import SynthDataset, write_synth_dir
from src.core.evaluator.ablation import run_ablation
from src.core.evaluator.evaluator import evaluate, infer_images
from src.core.model.diagnostics import model_gradcheck
from src.core.tensor.gradcheck import GradcheckResult, run_op_suite
from src.core.trainer.checkpoint import CheckpointError, load_checkpoint
from src.core.trainer.trainer import train
from src.utils.config_manager import ConfigError, RunConfig, load_run_config, parse_override_args
from src.utils.error_logger import Error_Logger
from src.utils.logger import get_logger, set_debug_level

logger = get_logger("parsegrid_main")

COMMANDS = ("train", "eval", "infer", "ablate", "gradcheck", "synth")
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def class_table(config: RunConfig) -> ClassTable:
    if config.data.source == "lip":
        return ClassTable.lip(config.model.num_classes)
    return synth_table(config.model.num_classes)


def build_datasets(config: RunConfig):
    """(学習データ, 検証データ) を返す（検証データは空のことがある）"""
    data = config.data
    if data.source == "lip":
        index = load_lip_dir(data.root)
        table = class_table(config)
        check_label_values(scan_label_values(index, "train"), table.num_classes, data.ignore_value)
        return (LipDataset(index, "train", table, data.ignore_value),
                LipDataset(index, "val", table, data.ignore_value))
    n_val = int(round(data.count * data.val_fraction))
    train_ds = SynthDataset(data.count - n_val, data.num_classes, data.hw, data.seed)
    # 検証サンプルのシードは学習サンプルの後ろに続ける
    val_ds = SynthDataset(n_val, data.num_classes, data.hw, data.seed + data.count - n_val)
    return train_ds, val_ds


def _echo_config(config: RunConfig) -> Path:
    path = config.write(Path(config.output.dir) / "effective.cfg")
    logger.info("実効設定を書き出しました", extra={"path": str(path)})
    return path


def cmd_train(config: RunConfig, positional: Sequence[str]) -> int:
    train_ds, val_ds = build_datasets(config)
    _echo_config(config)
    result = train(config.model, config.train, train_ds, config.output.dir,
                   augment_cfg=config.augment_config(), val_dataset=val_ds if len(val_ds) else None,
                   workers=config.run.workers)
    print(f"checkpoint: {result.checkpoint}")
    if result.losses:
        print(f"loss: {result.losses[0]:.4f} -> {result.losses[-1]:.4f} ({len(result.losses)} iterations)")
    return EXIT_OK


def cmd_eval(config: RunConfig, positional: Sequence[str]) -> int:
    train_ds, val_ds = build_datasets(config)
    dataset = val_ds if config.eval.split == "val" else train_ds
    if config.eval.split == "val" and len(val_ds) == 0:
        logger.warning("検証データが空のため学習データで評価します")
        dataset = train_ds
    model = load_checkpoint(config.eval.checkpoint, config.model, seed=config.train.seed)
    out = Path(config.output.dir)
    _echo_config(config)
    render_dir = out / "render" if config.eval.render else None
    result = evaluate(model, dataset, tta=config.eval.tta, table=class_table(config), render_dir=render_dir,
                      workers=config.run.workers, ignore_value=config.data.ignore_value)
    summary = result.summary()
    (out / "eval.json").write_text(json.dumps(summary, ensure_ascii=False, indent=2), encoding="utf-8")
    print(f"pixel_acc={summary['pixel_acc']:.4f} mean_acc={summary['mean_acc']:.4f} miou={summary['miou']:.4f}")
    return EXIT_OK


def cmd_infer(config: RunConfig, positional: Sequence[str]) -> int:
    if not positional:
        raise ConfigError(["infer: 入力画像が指定されていません"])
    model = load_checkpoint(config.infer.checkpoint, config.model, seed=config.train.seed)
    out_dir = config.infer.out or str(Path(config.output.dir) / "infer")
    written = infer_images(model, positional, out_dir, class_table(config), tta=config.eval.tta)
    for path in written:
        print(path)
    return EXIT_OK


def cmd_ablate(config: RunConfig, positional: Sequence[str]) -> int:
    train_ds, val_ds = build_datasets(config)
    _echo_config(config)
    report = run_ablation(config.model, config.train, train_ds, config.output.dir,
                          eval_dataset=val_ds if len(val_ds) else None, tta=config.eval.tta,
                          workers=config.run.workers, augment_cfg=config.augment_config())
    print(report.to_text(include_reference=False))
    return EXIT_OK if all(row.error is None for row in report.rows) else EXIT_RUNTIME


def _print_gradcheck(results: List[GradcheckResult]) -> None:
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name.ljust(width)}  {r.error:.3e}  (tol {r.tolerance:.0e})  {status}")


def cmd_gradcheck(config: RunConfig, positional: Sequence[str]) -> int:
    scale, eps = config.gradcheck.scale, config.gradcheck.eps
    results: List[GradcheckResult] = []
    if scale in ("ops", "all"):
        results += run_op_suite(seed=config.train.seed, eps=eps)
    if scale in ("model", "all"):
        results += model_gradcheck(seed=config.train.seed, eps=eps, coords_per_param=config.gradcheck.coords)
    _print_gradcheck(results)
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.error("勾配検査に失敗しました", extra={"failed": failed})
        return EXIT_RUNTIME
    logger.info("勾配検査に合格しました", extra={"checks": len(results)})
    return EXIT_OK


def cmd_synth(config: RunConfig, positional: Sequence[str]) -> int:
    s = config.synth
    splits = write_synth_dir(s.out, s.count, s.k, s.hw, s.seed, s.val_fraction)
    print(f"{s.out}: train={len(splits['train'])} val={len(splits['val'])}")
    return EXIT_OK


HANDLERS: Dict[str, Callable[[RunConfig, Sequence[str]], int]] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def parse_args(argv: Sequence[str]) -> Tuple[argparse.Namespace, Dict[str, str], List[str]]:
    """コマンド・--config・--debug を argparse で、残りを設定上書きと位置引数に分ける"""
    parser = argparse.ArgumentParser(
        prog="parsegrid",
        description="C-DLinkNet human parsing (desk scale)",
        allow_abbrev=False,
        epilog="任意の設定キーを --section.key=value（一意なら --key value）で上書きできます",
    )
    parser.add_argument("command", choices=COMMANDS, help="実行するサブコマンド")
    parser.add_argument("--config", type=str, default=None, help="設定ファイル（section.key=value 形式）")
    parser.add_argument("--debug", action="store_true", help="デバッグモード")
    args, rest = parser.parse_known_args(list(argv))
    overrides, positional = parse_override_args(rest, prefer_section=args.command)
    return args, overrides, positional


def main(argv: Optional[Sequence[str]] = None, error_logger: Optional[Error_Logger] = None) -> int:
    """メイン関数（終了コードを返す）"""
    argv = sys.argv[1:] if argv is None else argv
    try:
        args, overrides, positional = parse_args(argv)
        if args.debug:
            set_debug_level()
        config = load_run_config(args.config, overrides).validate(args.command)
    except ConfigError as e:
        logger.error(str(e), extra={"problems": e.problems})
        print(f"エラー: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as e:
        # argparse の --help は 0、引数エラーは設定エラー扱い
        return EXIT_OK if not e.code else EXIT_CONFIG

    error_logger = error_logger or Error_Logger()
    logger.info("parsegrid 開始", extra={"command": args.command, "config": args.config,
                                        "workers": config.run.workers})
    try:
        code = HANDLERS[args.command](config, positional)
    except ConfigError as e:
        logger.error(str(e), extra={"problems": e.problems})
        print(f"エラー: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as e:
        error_logger.log_error("CHECKPOINT_ERROR", str(e), {"command": args.command})
        print(f"エラー: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        error_logger.log_error("CLI_RUNTIME_ERROR", str(e),
                               {"command": args.command, "exception": type(e).__name__})
        print(f"エラー: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    logger.info("parsegrid 終了", extra={"command": args.command, "exit_code": code})
    return code


if __name__ == "__main__":
    sys.exit(main())
