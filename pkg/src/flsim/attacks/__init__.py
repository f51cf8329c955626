from flsim.attacks.data_poisoning import (
    DpaPlan,
    FlipKind,
    SignAlignResult,
    SurrogateResult,
    TuneResult,
    build_dpa_avg_normb,
    build_dpa_trmean,
    mc_sign_align,
    train_surrogate,
    tune_dp_mkrum,
)
from flsim.attacks.model_poisoning import (
    MpaContext,
    OmegaKind,
    ProjectConfig,
    deviation,
    dyn_opt,
    f_project,
    lie_attack,
    pga,
    stat_opt,
)

__all__ = [
    "DpaPlan", "FlipKind", "MpaContext", "OmegaKind", "ProjectConfig", "SignAlignResult", "SurrogateResult",
    "TuneResult", "build_dpa_avg_normb", "build_dpa_trmean", "deviation", "dyn_opt", "f_project", "lie_attack",
    "mc_sign_align", "pga", "stat_opt", "train_surrogate", "tune_dp_mkrum",
]
