"""Value-thresholded abstention on finite-horizon token MDPs."""

from ._core import (
    DynabsError,
    EvalReport,
    GeneratorConfig,
    Mdp,
    Probe,
    RolloutTrace,
    TheoremReport,
    Trajectory,
    abstention_time,
    build_random_mdp,
    certify_no_recovery,
    collect_traces,
    dip_and_recover,
    evaluate,
    max_completion_reward,
    objective,
    quantile_threshold,
    sample_trajectories,
    staged_reveal_default,
    train_probe,
    two_branch_toy,
    value,
    verify_all,
)

__all__ = [
    "DynabsError",
    "EvalReport",
    "GeneratorConfig",
    "Mdp",
    "Probe",
    "RolloutTrace",
    "TheoremReport",
    "Trajectory",
    "abstention_time",
    "build_random_mdp",
    "certify_no_recovery",
    "collect_traces",
    "dip_and_recover",
    "evaluate",
    "max_completion_reward",
    "objective",
    "quantile_threshold",
    "sample_trajectories",
    "staged_reveal_default",
    "train_probe",
    "two_branch_toy",
    "value",
    "verify_all",
]
