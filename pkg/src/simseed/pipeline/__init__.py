"""End-to-end population and crop pipelines plus the plot emitters they use."""
from .crop import (ClimateSource, compute_cell, derive_vapor_pressure, nearest_cell, run_crop,
                   run_crop_location, run_crop_regional)
from .jobs import (CropJob, PipelineError, PopulationJob, RunLog, load_crop_job,
                   load_demographic_manifest, load_population_job)
from .plots import PlotSpec, emit_blank, emit_heatmap, emit_pyramid, emit_timeseries
from .population import run_agents, run_demographics, run_density, run_population

__all__ = [
    "ClimateSource", "CropJob", "PipelineError", "PlotSpec", "PopulationJob", "RunLog",
    "compute_cell", "derive_vapor_pressure", "emit_blank", "emit_heatmap", "emit_pyramid",
    "emit_timeseries", "load_crop_job", "load_demographic_manifest", "load_population_job",
    "nearest_cell", "run_agents", "run_crop", "run_crop_location", "run_crop_regional",
    "run_demographics", "run_density", "run_population",
]
