# Cap BLAS threads before numpy is imported anywhere: keeps runs
# bit-reproducible and makes the timed acceptance checks single-core.
import os

os.environ.setdefault("URKT_THREADS", "1")
_n = os.environ["URKT_THREADS"]
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _n)
