import pytest
import torch
import torch.nn as nn

from segcyclegan.models import (DiscriminatorSpec, GeneratorSpec, SegmenterSpec, build_discriminator,
                                build_generator, build_segmenter, freeze)

# two residual blocks: InstanceNorm over a 2x2 bottleneck makes a deeper stack too ill-conditioned
# for central differences through ReLU kinks
TOY_GEN = GeneratorSpec(base_channels=4, residual_blocks=2)
# all stride 1 so an 8x8 input survives the five 4x4 convolutions
TOY_DISC = DiscriminatorSpec(channels=(4, 8, 8, 8), strides=(1, 1, 1, 1, 1))
TOY_SEG = SegmenterSpec(widths=(4, 8, 8), stage_depths=(2, 2, 3))

ACCEPTANCE_LINES = []


@pytest.fixture
def toy64():
    """Float64 toy graphs for gradient checks on 3x8x8 inputs."""
    torch.manual_seed(0)
    g_opt = build_generator(TOY_GEN, seed=1).double()
    g_sar = build_generator(TOY_GEN, seed=2).double()
    d_opt = build_discriminator(TOY_DISC, seed=3).double()
    seg = build_segmenter(TOY_SEG, seed=4).double()
    # calibrate BatchNorm to the exact statistics of one batch so eval mode keeps activations O(1)
    bns = [m for m in seg.modules() if isinstance(m, nn.BatchNorm2d)]
    for m in bns:
        m.momentum = None
    with torch.no_grad():
        seg.train()
        seg(torch.rand(8, 3, 8, 8, dtype=torch.float64) * 2 - 1)
    for m in bns:
        m.momentum = 0.1
    freeze(seg)
    rs = torch.rand(1, 3, 8, 8, dtype=torch.float64) * 2 - 1
    ro = torch.rand(1, 3, 8, 8, dtype=torch.float64) * 2 - 1
    gt = torch.randint(0, 2, (1, 8, 8))
    return {"g_opt": g_opt, "g_sar": g_sar, "d_opt": d_opt, "seg": seg, "rs": rs, "ro": ro, "gt": gt}


@pytest.fixture
def acceptance():
    def record(criterion: str, passed: bool, detail: str = ""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}" + (f": {detail}" if detail else ""))
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
