"""主程序入口"""

import argparse
import sys
import traceback
from pathlib import Path
from typing import List, Optional

from glioma_survival.config.config import ConfigManager, PipelineConfig
from glioma_survival.core import pipeline
from glioma_survival.exceptions.custom_exceptions import ConfigError, GliomaSurvivalError
from glioma_survival.utils.logging import Logger, logger

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    """命令行参数（优先级: 默认值 < 配置文件 < 环境变量 < 命令行）"""
    parser = argparse.ArgumentParser(prog="glioma-survival", description="胶质瘤影像组学生存期预测")
    parser.add_argument("--config", type=Path, help="YAML配置文件")
    parser.add_argument("--env-file", type=Path, help=".env 文件（GLIOMA_SURVIVAL_WORKERS）")
    parser.add_argument("--workers", type=int, help="并行线程数")
    parser.add_argument("--seed", type=int, help="模型与评估的随机种子")
    parser.add_argument("--output", type=Path, help="输出目录")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="覆盖单个配置项，可重复")
    parser.add_argument("--log-level", help="日志级别")
    parser.add_argument("--no-progress", action="store_true", help="不显示进度条")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("extract", help="提取特征表")
    for name, text in (("select", "特征选择"), ("cv", "重复分层交叉验证"), ("holdout", "留出集评估")):
        sub = commands.add_parser(name, help=text)
        sub.add_argument("--features", type=Path, help="特征表CSV（默认 输出目录/features.csv）")
        if name == "cv":
            sub.add_argument("--models", help="逗号分隔的模型种类，用于模型比较")
    train = commands.add_parser("train", help="训练模型")
    train.add_argument("--features", type=Path)
    train.add_argument("--selection", type=Path, help="特征选择结果CSV")
    predict = commands.add_parser("predict", help="预测生存期")
    predict.add_argument("--model", type=Path, required=True)
    predict.add_argument("--features", type=Path)
    commands.add_parser("report", help="增强肿瘤出现次数投影图")
    return parser


def load_settings(args: argparse.Namespace) -> PipelineConfig:
    """按优先级组装配置"""
    settings = ConfigManager().init_config(args.config)
    settings.apply_env(args.env_file)
    if args.workers is not None:
        settings.workers = args.workers
    if args.seed is not None:
        settings.model.seed = args.seed
        settings.evaluation.seed = args.seed
    if args.output is not None:
        settings.output_dir = args.output
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set 需要 SECTION.KEY=VALUE 形式: {item}")
        settings.set_value(key.strip(), value)
    if args.log_level:
        settings.log_level = args.log_level
    settings.validate(check_paths=args.command in ("extract", "report"))
    return settings


def run(args: argparse.Namespace, settings: PipelineConfig) -> None:
    progress = not args.no_progress and sys.stderr.isatty()
    if args.command == "extract":
        pipeline.cmd_extract(settings, progress=progress)
    elif args.command == "select":
        pipeline.cmd_select(settings, args.features)
    elif args.command == "train":
        pipeline.cmd_train(settings, args.features, args.selection, progress=progress)
    elif args.command == "predict":
        pipeline.cmd_predict(settings, args.model, args.features)
    elif args.command == "cv":
        models = [m.strip() for m in args.models.split(",") if m.strip()] if args.models else None
        pipeline.cmd_cv(settings, args.features, models, progress=progress)
    elif args.command == "holdout":
        pipeline.cmd_holdout(settings, args.features)
    elif args.command == "report":
        pipeline.cmd_report(settings)


def main(argv: Optional[List[str]] = None) -> int:
    """主函数，返回退出码"""
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings(args)
    except ConfigError as e:
        logger.error(f"配置错误: {str(e)}")
        return EXIT_CONFIG

    Logger().set_level(settings.log_level)
    Logger().add_file_handler(Path(settings.output_dir) / "glioma_survival.log")
    try:
        run(args, settings)
        return EXIT_OK
    except ConfigError as e:
        logger.error(f"配置错误: {str(e)}")
        return EXIT_CONFIG
    except GliomaSurvivalError as e:
        logger.error(f"程序执行出错: {str(e)}")
        return EXIT_FAILURE
    except Exception as e:
        logger.error(f"程序执行出错: {str(e)}")
        logger.debug(traceback.format_exc())
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
