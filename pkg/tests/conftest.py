# Pin BLAS to one thread before numpy loads: acceptance budgets are
# single-core, and tiny desk-scale matrices run faster without thread sync.
import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")
