import json
import traceback
from dataclasses import dataclass

from .core_baselines import EvaluatorError
from .core_diffusion import UndefinedCpcError
from .core_nn import NonFiniteError
from .core_pipeline import StageError
from .mem_logs import DatasetError, SchemaVersionError


@dataclass(frozen=True)
class ErrorReport: # {{{
  """A failure as shown to the user: category, plain message, technical details."""
  category: str
  user_message: str
  technical_details: str

  def render(self, verbose: bool = False) -> str:
    lines = [f"{self.category} Error", self.user_message]
    if verbose:
      lines += ["", "Technical Details:", self.technical_details]
    elif self.technical_details.strip():
      lines += [self.technical_details.strip().splitlines()[-1], "(run with -v for details)"]
    return "\n".join(lines)
# }}}


def describe_error(exc: BaseException) -> ErrorReport:
  """Map an exception to a category and a hint the user can act on."""
  details = "".join(traceback.format_exception(type(exc), exc, exc.__traceback__))
  raw = str(exc)

  if isinstance(exc, SchemaVersionError):
    return ErrorReport("Dataset", "Dataset was written by another schema version - Regenerate it with gen-logs.", details)
  if isinstance(exc, DatasetError):
    return ErrorReport("Dataset", "Dataset file is missing or damaged - Check the --data directory.", details)
  if isinstance(exc, StageError):
    if "not found" in raw:
      msg = f"Training data for stage '{exc.stage}' is missing - Run gen-logs first."
    elif "no complete episodes" in raw or "no logged steps" in raw:
      msg = f"Training data for stage '{exc.stage}' is empty - Generate more days with gen-logs --days."
    elif isinstance(exc.__cause__, NonFiniteError):
      msg = f"Stage '{exc.stage}' diverged - Lower the learning rate for that stage."
    else:
      msg = f"Stage '{exc.stage}' failed."
    return ErrorReport("Training", msg, details)
  if isinstance(exc, NonFiniteError):
    return ErrorReport("Training", f"Non-finite values in {exc.block or 'a network'}.", details)
  if isinstance(exc, EvaluatorError):
    return ErrorReport("Evaluation", f"CEM objective failed at iteration {exc.iteration}.", details)
  if isinstance(exc, UndefinedCpcError):
    return ErrorReport("Evaluation", "CPC is undefined for a run without clicks.", details)
  if isinstance(exc, KeyError) and ("config key" in raw or "recipe" in raw):
    return ErrorReport("Config", "Unknown setting: " + raw.strip("'\""), details)
  if isinstance(exc, json.JSONDecodeError):
    return ErrorReport("Config", "A JSON file could not be parsed.", details)
  if isinstance(exc, FileNotFoundError):
    return ErrorReport("Evaluation", "A checkpoint or run file is missing - Train first or check --run.", details)
  if isinstance(exc, (OSError, PermissionError)):
    return ErrorReport("Report", "Could not write output - Check the output directory.", details)
  if isinstance(exc, RuntimeError) and "cannot write report" in raw:
    return ErrorReport("Report", "Could not write the report - Check the output directory.", details)
  if isinstance(exc, MemoryError):
    return ErrorReport("Training", "Out of memory - Reduce the batch sizes.", details)
  if isinstance(exc, ValueError):
    return ErrorReport("Config", "Invalid setting or input.", details)
  return ErrorReport("Internal", "crossbid does not recognize the error.", details)
