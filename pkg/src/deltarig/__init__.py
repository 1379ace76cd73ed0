"""Face-rig approximation via learned differential-coordinate deformation.

The pipeline: probe a black-box rig to split its output into per-vertex
affine transforms and a nonlinear rest-space residual, learn that residual in
degree-weighted differential coordinates plus a few Cartesian anchor values,
and reconstruct full surfaces through one pre-factored anchored
least-squares solve per pose.
"""

from .errors import (AnchorCoverageError, AnchorError, ArtifactError,
                     ConfigError, DeltaRigError, DimensionMismatchError,
                     HashMismatchError, MeshFormatError, MeshStructureError,
                     RankDeficiencyError, SingularTransformError,
                     TrainingDivergedError)
from .evaluate import (ErrorReport, baseline_lbs, baseline_local,
                       baseline_pca_regression, evaluate_ours, export_heatmap,
                       export_histogram, format_report, run_benchmark,
                       sweep_anchor_count, sweep_depth, sweep_pc_percent,
                       sweep_train_size, write_sweep_csv)
from .mesh import (Mesh, VertexField, degree_matrix, face_height, load_obj,
                   save_obj, symmetric_laplacian, to_differential,
                   uniform_laplacian, weighted_differential)
from .network import (MLP, DifferentialModel, ModelBundle, PCABasis,
                      SubspaceModel, TrainConfig, build_differential_net,
                      build_single_subspace_net, build_subspace_nets,
                      grad_check, loss_and_grad, pca_fit, pca_fit_energy,
                      pca_pick_k, train)
from .pipeline import (Dataset, TrainSettings, generate_dataset,
                       linear_transforms_for, load_dataset,
                       predict_from_outputs, predict_full, save_dataset,
                       split_counts, train_all)
from .reconstruction import (AnchorSet, EigenDecomposition, FactorizedSystem,
                             anchored_normal_matrix, augment, build_system,
                             condition_report, eigen_analysis, factorize,
                             reconstruct, spectral_amplification)
from .rig import (DeformationSample, Normalization, Pose, RigSpec,
                  apply_affine, compose_pose, extract_nonlinear,
                  feature_indices_for_controls, influence_map, recover_T,
                  rest_pose, sample_pose, select_anchors, vectorize)
from .sparsemat import SparseMatrix
from .synthetic import (SyntheticRig, SyntheticRigConfig, delaunay_disk,
                        grid_mesh, head_mesh, make_synthetic_body_rig,
                        make_synthetic_face_rig, make_synthetic_rig,
                        uv_sphere)

__version__ = "0.1.0"
