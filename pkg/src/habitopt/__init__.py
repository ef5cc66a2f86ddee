"""Optimal consumption and investment with additive habits on finite event trees."""

from .errors import (
    ArbitrageDetected,
    BadProbability,
    BracketFailure,
    DivisionByZeroSPD,
    DomainViolation,
    GenerationExhausted,
    HabitOptError,
    Infeasible,
    InstanceTooLarge,
    InvalidWitness,
    LevelMismatch,
    NonConvergence,
    NonNested,
    NotInPayoffSpace,
    PreconditionViolated,
    VanishingAggregateSPD,
    WrongMarketClass,
    WrongUtilityFamily,
)
from .tree import (
    AdaptedProcess,
    EventTree,
    RandomVariable,
    build_tree,
    condexp,
    expect,
    inner,
    lift,
)
from .market import (
    MarketClass,
    MarketModel,
    PayoffSpaceBasis,
    SPDBundle,
    aggregate_spd,
    check_no_arbitrage,
    classify_market,
    consumption_to_wealth,
    deterministic_interest,
    payoff_space_basis,
    perturbed_aggregate_spd,
    project,
    spd_bundle,
    wealth_to_consumption,
)
from .preferences import (
    CustomUtility,
    ExponentialUtility,
    HabitPreferences,
    LogUtility,
    PerturbedConsumption,
    PowerUtility,
    foc_residual,
    habit_adjusted_marginal,
    perturbed_consumption,
    simplified_foc_residual,
    theta_table,
    utility_value,
)
from .solvers import (
    CompletePowerCoefficients,
    ExponentialCoefficients,
    Solution,
    SubSolution,
    has_inverse_marginal,
    solve_auto,
    solve_complete_general,
    solve_complete_power,
    solve_exponential_bonds,
    solve_general,
    solve_power_no_endowment,
    solve_primal_oracle,
    solve_subproblem,
)
from .analysis import (
    BoundReport,
    CounterexampleReport,
    EnvelopeReport,
    LinearityReport,
    PolicyProbe,
    Scenario,
    concavity_probe,
    counterexample_51,
    envelope_check,
    eta_bound_check,
    generate_scenario,
    linearity_law_check,
    monotonicity_probe,
    policy_bound,
    policy_bound_chain,
    wealth_sweep,
)

__version__ = "0.1.0"
