"""Pose-graph recovery for warehouse-like worlds via topological and
Manhattan abstractions: simulate, label, rectify, propose, constrain,
optimize."""

from .pose_graph import (
    ConstraintKind,
    PGEdge,
    Pose2D,
    PoseGraph,
    TopoLabel,
    between,
    compose,
    load_graph,
    save_graph,
)
from .topology import TopologicalGraph, TopoRegion, group, smooth_labels
from .manhattan import ManhattanGraph, MetaNode, bin_angle, build_manhattan, segment_length
from .similarity import (
    ConfidenceBand,
    ProposalPair,
    SiameseModel,
    contrastive_loss,
    init_model,
    propose,
    synthesize_training_pairs,
    train,
)
from .constraints import IcpResult, build_loop_constraints, build_manhattan_constraints, icp
from .optimizer import SolveReport, SolverConfig, chi2, dcs_scale, solve_batch, solve_incremental
from .metrics import AteResult, align, ate
from .simulator import NoiseModel, Scan, WarehouseLayout, corrupt, generate_layout, generate_trajectory
from .pipeline import PipelineConfig, StageId, build_scenario, run_feedback, run_stage

__version__ = "0.1.0"
