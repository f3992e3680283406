"""Sequential reserve, day-ahead and balancing markets, plus combinatorial and network auctions."""

from .system import SystemData, compute_requirements, load_shares, load_system, system_from_dict, with_scenarios
from .clearing import (
    BalancingResult,
    ClearingOutcome,
    DayAheadResult,
    InfeasibleStage,
    ReserveResult,
    balancing_model,
    clear_balancing,
    clear_day_ahead,
    clear_reserve,
    coalition_links,
    day_ahead_model,
    frozen_links,
    reserve_model,
    run_sequential,
)
from .allocation import AreaCosts, StageSurplus, allocate_area_costs
from .auctions import (
    AuctionOutcome,
    AuctionProblem,
    BidCurve,
    BidError,
    BlockAuction,
    NetworkAuction,
    load_bids,
    load_problem,
    problem_from_dict,
)
