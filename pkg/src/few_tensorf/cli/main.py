import logging
import sys
from argparse import ArgumentParser, RawDescriptionHelpFormatter
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from few_tensorf.cli.commands import cmd_bench, cmd_eval, cmd_make_scene, cmd_mesh, cmd_train
from few_tensorf.config import Settings, describe_config_keys
from few_tensorf.data_processing.analytic_scene import SCENE_KINDS
from few_tensorf.errors import CheckpointError, ConfigError

logger = logging.getLogger("FewT.CLI")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _add_common(parser: ArgumentParser, with_config: bool = True, with_overrides: bool = True,
                with_seed: bool = True) -> None:
    if with_config:
        parser.add_argument("--config", type=Path, default=None, help="JSON-файл конфигурации запуска")
    if with_overrides:
        parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="переопределение ключа конфигурации (можно повторять)")
    parser.add_argument("--out", type=Path, default=None, help="каталог результатов")
    if with_seed:
        parser.add_argument("--seed", type=int, default=None, help="зерно генераторов случайных чисел")


def build_parser() -> ArgumentParser:
    epilog = "Ключи конфигурации и значения по умолчанию:\n" + "\n".join(describe_config_keys())
    parser = ArgumentParser(
        prog="fewt",
        description="fewt: тензорные поля излучения для обучения по малому числу видов",
        epilog=epilog,
        formatter_class=RawDescriptionHelpFormatter,
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    train_parser = subparsers.add_parser("train", help="обучение модели", epilog=epilog,
                                         formatter_class=RawDescriptionHelpFormatter)
    _add_common(train_parser)
    train_parser.set_defaults(handler=cmd_train)

    eval_parser = subparsers.add_parser("eval", help="оценка чекпоинта на тестовых видах")
    _add_common(eval_parser, with_config=False, with_seed=False)
    eval_parser.add_argument("--checkpoint", type=Path, required=True, help="файл чекпоинта .fewt")
    eval_parser.add_argument("--dataset", type=Path, default=None, help="каталог сцены NeRF-synthetic")
    eval_parser.add_argument("--views", type=str, default=None, help="индексы тестовых видов через запятую")
    eval_parser.set_defaults(handler=cmd_eval)

    bench_parser = subparsers.add_parser("bench", help="сравнение вариантов конфигурации")
    _add_common(bench_parser)
    bench_parser.set_defaults(handler=cmd_bench)

    mesh_parser = subparsers.add_parser("mesh", help="экспорт сетки треугольников из поля плотности")
    _add_common(mesh_parser, with_config=False, with_overrides=False, with_seed=False)
    mesh_parser.add_argument("--checkpoint", type=Path, required=True, help="файл чекпоинта .fewt")
    mesh_parser.add_argument("--iso", type=float, default=None, help="уровень изоповерхности")
    mesh_parser.add_argument("--resolution", type=int, default=None, help="число узлов по оси")
    mesh_parser.add_argument("--format", choices=["stl", "obj"], default=None, help="формат файла")
    mesh_parser.set_defaults(handler=cmd_mesh)

    scene_parser = subparsers.add_parser("make-scene", help="создание аналитической сцены")
    scene_parser.add_argument("--kind", choices=SCENE_KINDS, default="sphere_and_boxes")
    scene_parser.add_argument("--out", type=Path, required=True, help="каталог сцены")
    scene_parser.add_argument("--resolution", type=int, default=100, help="размер изображений в пикселях")
    scene_parser.add_argument("--views", type=int, default=8, help="число обучающих видов")
    scene_parser.add_argument("--test-views", type=int, default=12, help="число тестовых видов")
    scene_parser.add_argument("--samples", type=int, default=1024, help="отсчетов на луч")
    scene_parser.add_argument("--seed", type=int, default=None)
    scene_parser.set_defaults(handler=cmd_make_scene)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = Settings()
    except ValidationError as e:
        print(f"fewt: ошибка переменных окружения FEWT_: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.handler(args, settings)
    except (ConfigError, FileNotFoundError, CheckpointError) as e:
        logger.error(f"{e}")
        print(f"fewt: ошибка: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.critical(f"Команда {args.command} завершилась ошибкой: {e}", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
