import sys

# cx_Freeze's module finder recurses deeply through scipy/pandas
sys.setrecursionlimit(5000)

from cx_Freeze import setup, Executable

from utils.settings import TOOL_NAME, TOOL_VERSION

# Dependencies
build_exe_options = {
    "packages": [
        "numpy",
        "laspy",
        "scipy",
        "scipy.spatial",
        "pandas",
        "json",
        "hashlib",
        "logging",
        "concurrent.futures",
        "controllers",
        "models",
        "utils",
        "views",
    ],
    "excludes": ["tkinter", "pytest", "hypothesis", "tensorflow", "torch", "jax", "keras"],
}

# Console application on every platform
base = None

executables = [
    Executable(
        "app.py",
        base=base,
        target_name="canopyforge.exe" if sys.platform == "win32" else "canopyforge",
    )
]

setup(
    name=TOOL_NAME,
    version=TOOL_VERSION,
    description="LiDAR point clouds to forest structure rasters (CHM, PAI, FHD)",
    options={"build_exe": build_exe_options},
    executables=executables,
)
