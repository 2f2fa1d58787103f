import os

from .core import ClusterTree, DataMatrix, DistanceMatrix, Partition
from .dcg import dcg_tree
from .hc import hc_build, hc_tree

DATA_DIR = os.path.join(os.path.dirname(__file__), "data")
ZOO = os.path.join(DATA_DIR, "zoo.csv")
