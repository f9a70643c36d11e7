from .machine import Fault, HaltCause, Machine, MachineState, MapCollision, load_image
from .sandbox import ProgramInputs, Sandbox, run_equivalence, run_program
from .scenarios import Outcome, Scenario, ScenarioSetupError, load_scenario, run_scenario

__all__ = [
    "Fault", "HaltCause", "Machine", "MachineState", "MapCollision", "load_image",
    "ProgramInputs", "Sandbox", "run_equivalence", "run_program",
    "Outcome", "Scenario", "ScenarioSetupError", "load_scenario", "run_scenario",
]
