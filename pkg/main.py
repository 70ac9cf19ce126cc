"""
命令行接口 (CLI) 层

- 使用 Click 库来构建 `parkgauss` 命令行应用。
- 解析用户输入的命令和参数，合并 默认值 ← 配置文件 ← 命令行 得到有效配置。
- 调用 core/ 与 services/ 中的相应函数来执行操作。
- 格式化并向用户显示结果。
- 此层不包含任何算法逻辑。

退出码：0 成功；1 用法/配置错误；2 数据错误；3 数值失败。
错误以单行 JSON {code, message, context} 写入标准错误。
"""

import functools
import json
import logging
import os
import sys
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import click

from common.exceptions import NumericalError, ParkGaussError, UsageError
from common.settings import SLOT_MODES, Settings, dump_settings, load_settings, settings_to_ini
from common.utilities import (format_eval_report, format_gradcheck_table, package_versions, setup_logging,
                              sha256_text, write_image, write_json, write_pgim)
from core.ipm import IpmConfig, build_grid, warp
from core.losses import MatchCriteria
from core.renderer import RenderConfig, render_views
from core.storage import load_scene, save_grid
from core.trainer import grad_check, make_gradcheck_problem, run_training
from perception.external import save_external_field
from perception.factory import PerceptionFactory
from services.dataset import FRAME_NAME, load_dataset
from services.evaluation import evaluate_directories, evaluate_scene, write_report
from services.synthdata import generate_from_settings

logger = logging.getLogger(__name__)

LOG_NAME = 'parkgauss.log'


@dataclass(frozen=True)
class CliConfig:
    """每个子命令共享的配置选项"""
    config_path: Optional[str] = None
    overrides: Tuple[str, ...] = ()
    threads: Optional[int] = None
    log_level: Optional[str] = None
    dump_config: Optional[str] = None

    def settings(self, extra: Iterable[str] = ()) -> Settings:
        """合并配置文件、--set 覆盖、专用参数（后者优先）"""
        overrides = list(self.overrides)
        if self.threads is not None:
            overrides.append(f"runtime.threads={self.threads}")
        if self.log_level:
            overrides.append(f"runtime.log_level={self.log_level}")
        overrides.extend(extra)
        return load_settings(self.config_path, overrides)


_CONFIG_OPTIONS = [
    click.option('--config', 'config_path', type=click.Path(dir_okay=False),
                 help='INI 或 JSON 配置文件'),
    click.option('--set', 'overrides', multiple=True, metavar='SECTION.KEY=VALUE',
                 help='覆盖单个配置项，可重复'),
    click.option('--threads', type=click.IntRange(min=0), help='内核并行线程数 (默认: 逻辑核数)'),
    click.option('--log-level', type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False),
                 help='日志级别'),
    click.option('--dump-config', type=click.Path(dir_okay=False),
                 help='写出有效配置 (INI) 后退出'),
]


def config_options(f):
    """给子命令附加公共配置选项，并以 cli_config 参数传入"""
    @functools.wraps(f)
    def wrapper(*args, config_path, overrides, threads, log_level, dump_config, **kwargs):
        cli_config = CliConfig(config_path, tuple(overrides), threads, log_level, dump_config)
        return f(*args, cli_config=cli_config, **kwargs)

    for option in reversed(_CONFIG_OPTIONS):
        wrapper = option(wrapper)
    return wrapper


def _prepare(cli_config: CliConfig, out_dir: Optional[str], extra: Iterable[str] = ()) -> Optional[Settings]:
    """
    构建有效配置并初始化日志。

    Returns:
        有效配置；若指定了 --dump-config 则写出配置并返回 None
    """
    settings = cli_config.settings(extra)
    if cli_config.dump_config:
        dump_settings(settings, cli_config.dump_config)
        click.echo(f"✅ 有效配置已写入: {cli_config.dump_config}")
        return None
    log_file = os.path.join(out_dir, LOG_NAME) if out_dir else None
    setup_logging(settings.runtime.log_level, log_file)
    return settings


def _jsonable_params(params: Dict[str, Any]) -> Dict[str, Any]:
    out = {}
    for key, value in params.items():
        if isinstance(value, CliConfig):
            out.update({k: list(v) if isinstance(v, tuple) else v for k, v in value.__dict__.items()})
        elif isinstance(value, tuple):
            out[key] = list(value)
        else:
            out[key] = value
    return out


def _write_manifest(out_dir: str, settings: Settings, seed: Optional[int] = None,
                    extra: Optional[Dict[str, Any]] = None) -> None:
    """在输出目录记录版本、种子、配置哈希与调用参数"""
    ctx = click.get_current_context()
    ini = settings_to_ini(settings)
    manifest = {
        'command': ctx.command_path,
        'params': _jsonable_params(ctx.params),
        'versions': {'python': sys.version.split()[0], **package_versions()},
        'seed': seed,
        'threads': settings.threads,
        'config_sha256': sha256_text(ini),
    }
    manifest.update(extra or {})
    write_json(os.path.join(out_dir, 'manifest.json'), manifest)
    with open(os.path.join(out_dir, 'config.ini'), 'w', encoding='utf-8') as fh:
        fh.write(ini)


def _select_frames(dataset, frame_ids: Sequence[int]) -> List:
    if not frame_ids:
        return dataset.eval_frames or dataset.frames
    by_id = {f.frame_id: f for f in dataset.frames}
    missing = [i for i in frame_ids if i not in by_id]
    if missing:
        raise UsageError(f"数据集中没有这些帧: {missing}", error_code="UNKNOWN_FRAME", details={"frames": missing})
    return [by_id[i] for i in frame_ids]


@click.group()
@click.version_option('1.0.0', prog_name='parkgauss')
def cli():
    """
    ParkGaussian - 环视鱼眼高斯重建与车位感知工具链

    一个在 CPU 上运行的四路鱼眼 3D 高斯重建工具，
    使用无迹变换投影鱼眼相机，并以可微 IPM 上的车位感知信号引导训练。

    常用命令:

    \b
    # 生成合成停车场数据集
    python main.py synth --out data/desk

    \b
    # 训练（光度阶段 + 车位感知阶段）
    python main.py train --data data/desk --out runs/full --iters 4000 --phase1 3000

    \b
    # 渲染留出帧并评估
    python main.py render --scene runs/full/scene.pgsc --data data/desk --out runs/full/render
    python main.py eval --pred runs/full/render --gt data/desk

    \b
    # 梯度检查
    python main.py gradcheck --seed 7

    \b
    # 写出有效配置
    python main.py train --data data/desk --out runs/x --dump-config effective.ini
    """
    pass


@cli.command()
@config_options
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False), help='输出数据集目录')
@click.option('--frames', type=click.IntRange(min=1), help='帧数')
@click.option('--seed', type=int, help='随机种子')
def synth(cli_config: CliConfig, out_dir: str, frames: Optional[int], seed: Optional[int]):
    """生成带车位标注的合成四路鱼眼数据集"""
    extra = []
    if frames is not None:
        extra.append(f"synth.frames={frames}")
    if seed is not None:
        extra.append(f"synth.seed={seed}")
    settings = _prepare(cli_config, out_dir, extra)
    if settings is None:
        return
    click.echo(f"正在生成 {settings.synth.frames} 帧合成数据...")
    generate_from_settings(settings, out_dir)
    _write_manifest(out_dir, settings, settings.synth.seed)
    click.echo(f"✅ 合成数据集已生成: {out_dir}")


@cli.command()
@config_options
@click.option('--data', 'data_dir', required=True, type=click.Path(file_okay=False), help='数据集目录')
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False), help='训练输出目录')
@click.option('--iters', type=click.IntRange(min=0), help='总迭代次数')
@click.option('--phase1', type=click.IntRange(min=0), help='光度阶段迭代次数 (默认: 总数的 2/3)')
@click.option('--seed', type=int, help='随机种子')
@click.option('--slot-mode', type=click.Choice(SLOT_MODES), help='车位感知消融模式')
@click.option('--resume', type=click.Path(dir_okay=False), help='从 npz 训练状态继续')
def train(cli_config: CliConfig, data_dir: str, out_dir: str, iters: Optional[int], phase1: Optional[int],
          seed: Optional[int], slot_mode: Optional[str], resume: Optional[str]):
    """两阶段训练：先光度损失，后加入车位感知损失"""
    extra = []
    if iters is not None:
        extra.append(f"trainer.total_iters={iters}")
        extra.append(f"trainer.phase1_iters={phase1 if phase1 is not None else iters * 2 // 3}")
    elif phase1 is not None:
        extra.append(f"trainer.phase1_iters={phase1}")
    if seed is not None:
        extra.append(f"trainer.seed={seed}")
    if slot_mode:
        extra.append(f"trainer.slot_mode={slot_mode}")
    settings = _prepare(cli_config, out_dir, extra)
    if settings is None:
        return

    dataset = load_dataset(data_dir, settings.trainer.holdout_every)
    _write_manifest(out_dir, settings, settings.trainer.seed)
    t = settings.trainer
    click.echo(f"正在训练: {t.total_iters} 次迭代 (光度阶段 {t.phase1_iters})，模式 {t.slot_mode}...")
    result = run_training(settings, dataset, out_dir, resume)
    if result.evaluation:
        write_report(result.evaluation, out_dir, 'eval')
        click.echo(format_eval_report(result.evaluation))
    click.echo(f"✅ 训练完成: {result.scene.count} 个高斯，场景已写入 {os.path.join(out_dir, 'scene.pgsc')}")


@cli.command()
@config_options
@click.option('--scene', 'scene_path', required=True, type=click.Path(exists=True, dir_okay=False),
              help='PGSC 场景文件')
@click.option('--data', 'data_dir', required=True, type=click.Path(file_okay=False), help='数据集目录 (标定与轨迹)')
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False), help='输出目录')
@click.option('--frame', 'frame_ids', multiple=True, type=int, help='帧号，可重复 (默认: 留出帧)')
@click.option('--pgim', is_flag=True, help='同时写出 f32 原始缓冲')
def render(cli_config: CliConfig, scene_path: str, data_dir: str, out_dir: str, frame_ids: Tuple[int, ...],
           pgim: bool):
    """渲染场景到数据集的四路鱼眼视角，输出 <out>/<相机>/<帧号>.png"""
    settings = _prepare(cli_config, out_dir)
    if settings is None:
        return
    scene = load_scene(scene_path)
    dataset = load_dataset(data_dir, settings.trainer.holdout_every)
    config = RenderConfig.from_settings(settings)
    frames = _select_frames(dataset, frame_ids)
    for frame in frames:
        for view in render_views(scene, dataset.cameras, config, frame.pose):
            target = os.path.join(out_dir, view.camera.name, FRAME_NAME.format(frame.frame_id))
            write_image(target, view.image())
            if pgim:
                write_pgim(os.path.splitext(target)[0] + '.pgim', view.rgb)
    _write_manifest(out_dir, settings, extra={'frames': [f.frame_id for f in frames]})
    click.echo(f"✅ 已渲染 {len(frames)} 帧 × {len(dataset.cameras)} 路相机到 {out_dir}")


@cli.command()
@config_options
@click.option('--data', 'data_dir', required=True, type=click.Path(file_okay=False), help='数据集目录')
@click.option('--out', 'out_dir', required=True, type=click.Path(file_okay=False), help='输出目录')
@click.option('--frame', 'frame_id', type=int, help='帧号 (默认: 第一帧)')
@click.option('--scene', 'scene_path', type=click.Path(exists=True, dir_okay=False),
              help='使用渲染图像代替数据集图像')
@click.option('--fields', is_flag=True, help='运行解析检测器并写出外部教师热力图 (PGHM)')
def ipm(cli_config: CliConfig, data_dir: str, out_dir: str, frame_id: Optional[int], scene_path: Optional[str],
        fields: bool):
    """把一帧四路鱼眼图像拼接为 BEV 图像，并写出 IPM 网格缓存"""
    settings = _prepare(cli_config, out_dir)
    if settings is None:
        return
    dataset = load_dataset(data_dir, settings.trainer.holdout_every)
    frame = _select_frames(dataset, [frame_id])[0] if frame_id is not None else dataset.frames[0]
    grid = build_grid(dataset.cameras, IpmConfig.from_settings(settings))
    save_grid(grid, os.path.join(out_dir, 'grid.pgip'))

    if scene_path:
        views = render_views(load_scene(scene_path), dataset.cameras, RenderConfig.from_settings(settings), frame.pose)
        images = [v.image() for v in views]
    else:
        images = frame.images(dataset.cameras)
    bev = warp(grid, images)
    write_image(os.path.join(out_dir, f"{frame.key}_bev.png"), bev)
    click.echo(f"✅ BEV 图像已写入: {os.path.join(out_dir, frame.key + '_bev.png')}")

    if fields:
        detector = PerceptionFactory.from_settings(settings, 'analytic')
        field, corners, edges = detector.perceive(bev, frame.key)
        save_external_field(os.path.join(out_dir, f"{frame.key}_corners.pghm"), field)
        save_external_field(os.path.join(out_dir, f"{frame.key}_edges.pghm"), edges)
        click.echo(f"🔎 检出 {len(corners)} 个角点，热力图已写入 {out_dir}")
    _write_manifest(out_dir, settings, extra={'frame': frame.frame_id})


@cli.command(name='eval')
@config_options
@click.option('--pred', 'pred_dir', type=click.Path(file_okay=False), help='预测图像目录')
@click.option('--gt', 'gt_dir', type=click.Path(file_okay=False), help='GT 图像目录')
@click.option('--detections', type=click.Path(dir_okay=False), help='车位检测 JSON，与 GT 目录的 slots.json 匹配')
@click.option('--scene', 'scene_path', type=click.Path(exists=True, dir_okay=False), help='PGSC 场景 (配合 --data)')
@click.option('--data', 'data_dir', type=click.Path(file_okay=False), help='数据集目录 (配合 --scene)')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), help='报告输出目录')
def evaluate(cli_config: CliConfig, pred_dir: Optional[str], gt_dir: Optional[str], detections: Optional[str],
             scene_path: Optional[str], data_dir: Optional[str], out_dir: Optional[str]):
    """评估：图像目录对比 (--pred/--gt) 或场景在留出帧上的评估 (--scene/--data)"""
    settings = _prepare(cli_config, out_dir)
    if settings is None:
        return
    if pred_dir and gt_dir:
        report = evaluate_directories(pred_dir, gt_dir, detections, MatchCriteria.from_settings(settings))
    elif scene_path and data_dir:
        dataset = load_dataset(data_dir, settings.trainer.holdout_every)
        report = evaluate_scene(load_scene(scene_path), dataset, settings)
    else:
        raise UsageError("需要 --pred 与 --gt，或 --scene 与 --data", error_code="MISSING_INPUTS")

    click.echo(format_eval_report(report))
    if out_dir:
        paths = write_report(report, out_dir)
        _write_manifest(out_dir, settings)
        click.echo(f"✅ 报告已写入: {paths['json']}")


@cli.command()
@config_options
@click.option('--seed', default=7, show_default=True, type=int, help='问题与探针的随机种子')
@click.option('--count', default=30, show_default=True, type=click.IntRange(min=1, max=50), help='高斯数量')
@click.option('--probes', default=6, show_default=True, type=click.IntRange(min=1), help='每个参数组的探针数')
@click.option('--component', 'components', multiple=True,
              type=click.Choice(['rgb', 'align', 'ipm', 'cam', 'feature']), help='要检查的损失分量，可重复')
@click.option('--slot-mode', default='full', show_default=True, type=click.Choice(SLOT_MODES))
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), help='报告输出目录')
def gradcheck(cli_config: CliConfig, seed: int, count: int, probes: int, components: Tuple[str, ...],
              slot_mode: str, out_dir: Optional[str]):
    """解析梯度与中心差分对比，输出最大相对误差表"""
    settings = _prepare(cli_config, out_dir)
    if settings is None:
        return
    click.echo(f"正在进行梯度检查 (种子 {seed}, {count} 个高斯)...")
    scene, batch, ctx = make_gradcheck_problem(seed, count, slot_mode=slot_mode)
    report = grad_check(scene, batch, ctx, components or ('rgb', 'align', 'ipm', 'cam'), probes=probes, seed=seed)
    click.echo(format_gradcheck_table(report))
    click.echo(f"stop-gradient 约束: {'✅' if report['sg_contract'] else '❌'}")
    if out_dir:
        write_json(os.path.join(out_dir, 'gradcheck.json'), report)
        _write_manifest(out_dir, settings, seed)
    if not report['passed']:
        raise NumericalError("梯度检查未通过", error_code="GRADCHECK_FAILED", details=report['worst'] or {})
    click.echo("✅ 所有分量均在阈值内")


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """
    运行 CLI 并返回退出码。

    :param argv: 参数列表（不含程序名），None 时读取 sys.argv
    """
    try:
        rv = cli.main(args=list(argv) if argv is not None else None, prog_name='parkgauss',
                      standalone_mode=False)
        return rv if isinstance(rv, int) else 0
    except click.exceptions.Abort:
        click.echo("已取消", err=True)
        return 1
    except click.ClickException as e:
        click.echo(json.dumps({'code': 'USAGE_ERROR', 'message': e.format_message(), 'context': {}},
                              ensure_ascii=False), err=True)
        return 1
    except ParkGaussError as e:
        logger.debug("命令失败", exc_info=True)
        click.echo(e.to_json(), err=True)
        return e.exit_code
    except OSError as e:
        click.echo(json.dumps({'code': 'IO_ERROR', 'message': str(e),
                               'context': {'path': e.filename}}, ensure_ascii=False), err=True)
        return 2


if __name__ == '__main__':
    sys.exit(dispatch())
