"""Joint two-task training from two disjointly-labeled datasets.

Dataset A is labeled for person re-identification, dataset B for
pedestrian attribute recognition; two co-trained instances of one
shared-trunk/two-head network pseudo-supervise each other on whichever
task a sample lacks labels for, and the better instance is kept.
"""

from .data import (MixedBatch, PartialDataset, Sample, load_dataset,
                   make_synthetic_pair, sample_batch, split_holdout)
from .losses import (LossConfig, LossReport, attr_bce_loss, bce_consistency,
                     dice_consistency, id_ce_loss, semi_labeled_total,
                     semi_unlabeled_total, supervised_total, total_objective,
                     triplet_consistency)
from .metrics import MetricsReport, ParMetrics, ReidMetrics, par_metrics, reid_map_cmc
from .model import (ArchConfig, DualOutputs, DualTaskModel, TaskOutputs,
                    build_model, forward_dual, init_dual)
from .trainer import (TrainConfig, TrainedRun, cosine_lr, evaluate_model,
                      select_best, train)
from .experiments import (ExperimentSpec, ManifestSpec, ReportRow, SyntheticSpec,
                          aggregate_mean, emit_report, run_experiment, run_grid)

__version__ = "0.1.0"
