"""Controller/head/fault daemon hierarchy and grow/fork planning."""

from .plan import BarrierService, GrowKind, GrowPlan, initial_placement, plan_grow

__all__ = ["BarrierService", "GrowKind", "GrowPlan", "initial_placement", "plan_grow"]
