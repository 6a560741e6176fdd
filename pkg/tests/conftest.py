import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def shen_small():
    from specblocks.baseplate import build_shen_baseplate

    return build_shen_baseplate(32, 12)


@pytest.fixture(scope="session")
def fourier_small():
    from specblocks.baseplate import build_fourier2d_baseplate

    return build_fourier2d_baseplate(16, 3)


@pytest.fixture(scope="session")
def cosine_small():
    from specblocks.baseplate import build_cosine2d_baseplate

    return build_cosine2d_baseplate(13, 3)


def mode_dict(bp, a):
    """Packed Fourier coefficients -> {(j, l): complex} over the full retained set."""
    z = bp.unpack(a)
    out = {}
    for p, (j, l) in enumerate(bp.modes):
        out[(int(j), int(l))] = complex(z[p])
        out[(-int(j), -int(l))] = complex(np.conj(z[p]))
    return out


def convolve(c1, c2):
    out = {}
    for (j1, l1), v1 in c1.items():
        for (j2, l2), v2 in c2.items():
            k = (j1 + j2, l1 + l2)
            out[k] = out.get(k, 0.0) + v1 * v2
    return out


def pack_dict(bp, d):
    z = np.array([d.get((int(j), int(l)), 0.0) for j, l in bp.modes], dtype=complex)
    return bp.pack(z)


@pytest.fixture
def acceptance(request):
    """``record(num, title, passed, detail)`` for the acceptance summary lines."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", {})

    def record(num, title, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {num:>2}: {title} ({detail})"
        lines[num] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
