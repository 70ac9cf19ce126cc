"""
测试公共夹具

把项目根目录加入 sys.path，并提供小尺寸相机、场景、IPM 网格与合成数据集。
所有夹具都按桌面规模缩小（64×48 鱼眼、64×64 BEV），保证测试在 CPU 上快速完成。
"""

import os
import sys

import numpy as np
import pytest

# 添加项目根目录到路径
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from common.settings import Settings
from core.camera import FisheyeCamera, FisheyeIntrinsics, Pose, default_rig
from core.ipm import IpmConfig, build_grid
from core.scene import GaussianScene, SH_C0
from services.dataset import load_dataset
from services.synthdata import default_layout, default_trajectory, generate

SMALL_SIZE = (64, 48)
SMALL_IPM = dict(px_per_m=8.0, bev_width=64, bev_height=64)


def tiny_settings(**sections) -> Settings:
    """测试用的小规模有效配置；sections 形如 trainer={'total_iters': 4}"""
    settings = Settings()
    settings.ipm.px_per_m = SMALL_IPM['px_per_m']
    settings.ipm.bev_width = SMALL_IPM['bev_width']
    settings.ipm.bev_height = SMALL_IPM['bev_height']
    settings.scene.count = 150
    settings.scene.sh_degree = 1
    settings.losses.topk_k = 64
    settings.trainer.total_iters = 4
    settings.trainer.phase1_iters = 2
    settings.trainer.eval_every = 0
    settings.trainer.log_every = 1
    settings.trainer.checkpoint_every = 0
    settings.runtime.threads = 1
    settings.synth.width, settings.synth.height = SMALL_SIZE
    settings.synth.frames = 10
    settings.synth.supersample = 1
    for name, values in sections.items():
        for key, value in values.items():
            setattr(getattr(settings, name), key, value)
    return settings.validate()


@pytest.fixture
def pinhole_like_camera() -> FisheyeCamera:
    """零畸变等距鱼眼，位姿为单位阵"""
    intr = FisheyeIntrinsics(fx=100.0, fy=100.0, cx=320.0, cy=240.0, k=(0.0, 0.0, 0.0, 0.0),
                             width=640, height=480)
    return FisheyeCamera('test', intr, Pose.identity())


@pytest.fixture
def small_camera() -> FisheyeCamera:
    """64×48 鱼眼，主点落在整数像素上"""
    intr = FisheyeIntrinsics(fx=20.0, fy=20.0, cx=32.0, cy=24.0, k=(0.02, -0.004, 0.0005, 0.0),
                             width=64, height=48)
    return FisheyeCamera('small', intr, Pose.identity())


@pytest.fixture
def small_rig():
    return default_rig(*SMALL_SIZE)


@pytest.fixture
def small_ipm() -> IpmConfig:
    return IpmConfig(**SMALL_IPM)


@pytest.fixture
def small_grid(small_rig, small_ipm):
    return build_grid(small_rig, small_ipm)


def make_scene(means, colors, log_scale: float = np.log(0.05), logit_opacity: float = 4.0,
               sh_degree: int = 0) -> GaussianScene:
    """按给定中心与 DC 颜色构造各向同性场景"""
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    n = len(means)
    sh = np.zeros((n, (sh_degree + 1) ** 2, 3))
    sh[:, 0, :] = (np.asarray(colors, dtype=np.float64).reshape(n, 3) - 0.5) / SH_C0
    return GaussianScene(means=means, quats=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
                         log_scales=np.full((n, 3), log_scale), logit_opacities=np.full(n, logit_opacity),
                         sh_coeffs=sh, sh_degree=sh_degree)


@pytest.fixture
def random_scene() -> GaussianScene:
    """相机前方的 20 个随机高斯"""
    rng = np.random.default_rng(3)
    n = 20
    means = np.column_stack([rng.uniform(-1.0, 1.0, n), rng.uniform(-0.8, 0.8, n), rng.uniform(2.0, 4.0, n)])
    scene = make_scene(means, rng.uniform(0.1, 0.9, (n, 3)), log_scale=np.log(0.15), logit_opacity=0.5,
                       sh_degree=1)
    q = rng.normal(size=(n, 4))
    scene.quats[:] = q / np.linalg.norm(q, axis=1, keepdims=True)
    scene.log_scales[:] = np.log(rng.uniform(0.08, 0.25, (n, 3)))
    scene.sh_coeffs[:, 1:, :] = rng.normal(scale=0.1, size=scene.sh_coeffs[:, 1:, :].shape)
    return scene


@pytest.fixture(scope='session')
def synthetic_root(tmp_path_factory) -> str:
    """10 帧 64×48 的合成数据集（整个测试会话共享，只读使用）"""
    root = str(tmp_path_factory.mktemp('synth'))
    generate(root, default_layout(), default_trajectory(frames=10), default_rig(*SMALL_SIZE), seed=0,
             ipm=IpmConfig(**SMALL_IPM), supersample=1)
    return root


@pytest.fixture(scope='session')
def synthetic_dataset(synthetic_root):
    return load_dataset(synthetic_root)
