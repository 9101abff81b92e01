from .report import TraceReport
from .runner import run_scenario, run_scenario_file
from .scenario import Scenario, load_scenario, parse_scenario_text

__all__ = ["TraceReport", "run_scenario", "run_scenario_file",
           "Scenario", "load_scenario", "parse_scenario_text"]
