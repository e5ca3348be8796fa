"""voxsplat: online RGB-D dense mapping with a hybrid sparse-voxel-TSDF +
Gaussian-primitive scene representation and open-vocabulary object queries."""

from .config import ConfigError, EngineConfig
from .dataset import (Dataset, DatasetError, Frame, GroundTruthSegmentation,
                      SynthObject, SynthSpec, load_dataset, synth_scene)
from .edit import EditCommand, EditError, EditReport, ObjectDescriptor, apply_edit, object_descriptor
from .engine import MapState, build_map, load_map, save_map
from .fusion import (DepthSample, SampleBatch, downsample_depth, fuse_semantics,
                     integrate_frame, tsdf_sample)
from .gaussians import (GaussianMap, Keyframe, check_consistency, init_gaussians,
                        is_keyframe, primitives_in_voxels, prune, read_ply, write_ply)
from .grid import (SparseVoxelGrid, VoxelView, dda_traverse, load_snapshot,
                   pack_key, pack_keys, save_snapshot, unpack_keys, voxel_center,
                   world_to_voxel)
from .metrics import SegmentationScore, depth_l1, iou3d, psnr, segmentation_benchmark
from .oracle import (Candidate, ConstantOptimumOracle, HttpThresholdOracle,
                     OracleError, ScriptedMaskOracle, ThresholdOracle)
from .query import (Cluster, NoMatchError, QueryResult, SimilarityField,
                    ThresholdWindow, adaptive_query, dbscan, evaluate_round,
                    fixed_query, keyframe_score, sample_thresholds,
                    score_keyframes, seed_selection, similarity_field)
from .render import (CameraIntrinsics, Projected2DGaussian, invert_pose,
                     normalized_depth, project_gaussian, render)

__version__ = "0.1.0"
