from . import utils
from .compression import CompressConfig, QuantizedModel, dequantize, load_checkpoint, quantize, save_checkpoint
from .config import RunConfig, load_config
from .contribution import accumulate_contributions, average_contribution, trim
from .dataset import Dataset
from .density import DensifyConfig, GradientSource
from .evaluation import EvalConfig, EvalReport, evaluate_mesh, f1_score
from .meshing import MeshConfig, TriangleMesh, TSDFVolume, fuse
from .objective import LossWeights
from .pipeline import BlockConfig, BlockPartition, merge, partition, pretrain, tune_block, tune_blocks
from .rasterizer import RenderOptions, render, render_backward
from .scenegen import SceneSpec, generate, town_spec
from .surfels import Camera, SceneModel, Surfel
from .threadable import set_threads
from .training import Trainer, TrainConfig, TrimConfig

VERSION = "0.1.0"
