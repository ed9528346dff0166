import pytest

from percolation_lab.kernel import KernelSpec, build_kernel


@pytest.fixture
def box_kernel():
    """D uniform on {-1, 0, 1}."""
    return build_kernel(KernelSpec(d=1, alpha=2.0, L=1, R=1, profile='uniform_box'))


@pytest.fixture
def pair_kernel():
    """D uniform on {-1, 1}."""
    return build_kernel(KernelSpec(d=1, alpha=2.0, L=1, R=1, profile='uniform_box', exclude_origin=True))
