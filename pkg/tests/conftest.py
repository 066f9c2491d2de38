import pytest
import torch

from proavdit.config import RunConfig
from proavdit.mdsa import MDSAConfig

TINY = MDSAConfig(
    frames=8, height=8, width=8, downsample=2, c_mid=8, c_lat=2, heads=2,
    enc_blocks=1, dec_blocks=1, proj_layers=1, proj_heads=2, proj_hidden=8, proj_mlp=16,
    block_t=2, block_h=2, block_w=2,
)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def tiny_run_config(tmp_path, **kw):
    base = dict(
        data_root=str(tmp_path / "data"), out_dir=str(tmp_path / "runs"),
        c_mid=16, proj_layers=1, proj_hidden=32, proj_mlp=64, dec_blocks=1,
        depth=2, hidden=64, ae_batch=2, diff_batch=2, ae_lr=1e-3, diff_lr=1e-3,
        disc_start=4, stage1_fraction=0.25, log_every=5, ckpt_every=1000, mi_draws=4, gl_iters=8,
    )
    base.update(kw)
    return RunConfig(**base)


def randomize_(module, scale=0.3, seed=0):
    """Overwrite every parameter with seeded noise (breaks zero-initialised gates)."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * scale)
    return module
