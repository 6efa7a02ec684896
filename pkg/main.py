import sys
import argparse
from typing import Optional

from tabulate import tabulate

from core.config import parse_config, read_config_data
from core.errors import ConfigInvalid, ConfigParse, MisgradError, TrainingError
from core.estimators import Estimator
from core.experiment import render, run, sweep
from core.metrics_io import compare, format_comparison


def print_error(message: str, details: Optional[str] = None) -> None:
    """Выводит сообщение об ошибке в stderr."""
    print(f'Ошибка: {message}', file=sys.stderr)
    if details:
        print(f'Подробности: {details}', file=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='misgrad',
        description='Обучение с выборкой по значимости и оптимальной MIS-оценкой градиента',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=(
            'Примеры использования:\n'
            '  Запуск: misgrad run --config poly6.json --seed 1 --out runs\n'
            '  Серия: misgrad sweep --config poly6.json --estimators uniform,is,omis\n'
            '  Сравнение: misgrad compare runs/a/metrics.csv runs/b/metrics.csv\n'
            '  Отрисовка: misgrad render runs/image-omis-seed0-...\n\n'
            'Оценщики: ' + ', '.join(e.value for e in Estimator)
        )
    )
    commands = parser.add_subparsers(dest='command', required=True)

    def add_run_options(sub: argparse.ArgumentParser) -> None:
        sub.add_argument('--config', help='Путь к JSON-конфигурации', metavar='ПУТЬ')
        sub.add_argument('--seed', type=int, help='Зерно генератора')
        sub.add_argument('--epochs', type=int, help='Число эпох')
        sub.add_argument('--out', default='runs', help='Корневой каталог результатов',
                         metavar='КАТАЛОГ')

    run_parser = commands.add_parser('run', help='Один запуск обучения')
    add_run_options(run_parser)
    run_parser.add_argument('--estimator', choices=[e.value for e in Estimator],
                            help='Оценщик градиента')

    sweep_parser = commands.add_parser('sweep', help='Серия запусков с разными оценщиками')
    add_run_options(sweep_parser)
    sweep_parser.add_argument('--estimators', required=True,
                              help='Оценщики через запятую, например uniform,is,omis')

    compare_parser = commands.add_parser('compare', help='Сравнение файлов метрик')
    compare_parser.add_argument('files', nargs='+', help='Файлы metrics.csv', metavar='ФАЙЛ')

    render_parser = commands.add_parser('render', help='Предсказание сети в PPM')
    render_parser.add_argument('run_dir', help='Каталог запуска', metavar='КАТАЛОГ')
    render_parser.add_argument('--output', help='Путь к PPM-файлу', metavar='ПУТЬ')
    return parser


def _overrides(args) -> dict:
    return {'seed': args.seed, 'epochs': args.epochs,
            'estimator': getattr(args, 'estimator', None)}


def main(argv: Optional[list] = None) -> None:
    """Точка входа в приложение."""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        if args.command == 'run':
            cfg = parse_config(args.config, _overrides(args))
            manifest, logs = run(cfg, args.out)
            if logs:
                last = logs[-1]
                table_data = [
                    ['Каталог:', manifest.output_dir],
                    ['Эпох:', manifest.epochs_completed],
                    ['Потери (обучение):', f'{last.train_loss:.6g}'],
                    ['Потери (оценка):', f'{last.eval_loss:.6g}'],
                ]
                print(tabulate(table_data, tablefmt='grid', colalign=('right', 'left')))

        elif args.command == 'sweep':
            base = read_config_data(args.config) if args.config else {}
            base.update({k: v for k, v in _overrides(args).items() if v is not None})
            estimators = [e.strip() for e in args.estimators.split(',') if e.strip()]
            unknown = [e for e in estimators if e not in {x.value for x in Estimator}]
            if unknown:
                print_error('Неизвестные оценщики', ', '.join(unknown))
                sys.exit(1)
            _, table = sweep(base, estimators, args.out)
            print(table)

        elif args.command == 'compare':
            print(format_comparison(compare(args.files)))

        elif args.command == 'render':
            path = render(args.run_dir, args.output)
            print(f'Предсказание записано: {path}')

    except FileNotFoundError as e:
        print_error('Файл не найден', str(e))
        sys.exit(1)
    except PermissionError as e:
        print_error('Ошибка доступа к файлу', str(e))
        sys.exit(1)
    except ConfigParse as e:
        details = f'ключ {e.key_path}' if e.key_path else None
        print_error(f'Ошибка разбора конфигурации: {e}', details)
        sys.exit(1)
    except ConfigInvalid as e:
        print_error('Некорректная конфигурация', str(e))
        sys.exit(1)
    except TrainingError as e:
        print_error('Ошибка обучения', str(e))
        sys.exit(1)
    except MisgradError as e:
        print_error('Ошибка', str(e))
        sys.exit(1)
    except ValueError as e:
        print_error('Некорректные данные', str(e))
        sys.exit(1)
    except Exception as e:
        print_error('Произошла непредвиденная ошибка', str(e))
        sys.exit(1)


if __name__ == '__main__':
    main()
