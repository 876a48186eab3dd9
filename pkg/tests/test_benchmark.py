import os
import runpy

import pytest

from valvebot import kernels

BENCH = os.path.join(os.path.dirname(__file__), "..", "benchmarks", "bench_kernels.py")


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled extension not built")
def test_benchmark_runs_and_backends_agree(capsys):
    main = runpy.run_path(BENCH)["main"]
    assert main(["--repeat", "1"]) == 0
    out = capsys.readouterr().out
    assert out.count("identical True") == 2
