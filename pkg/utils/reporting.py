import json
import logging
import os
import platform

import numpy as np
import pandas as pd
from tabulate import tabulate

# Configure logging
logger = logging.getLogger(__name__)

PACKAGE_VERSION = "0.1.0"

REPORT_STYLE = (
    "<style>body{font-family:Arial;margin:20px;} table{border-collapse:collapse;width:100%;} "
    "th,td{padding:8px;text-align:left;border-bottom:1px solid #ddd;} "
    "th{background-color:#f2f2f2;} tr:hover{background-color:#f5f5f5;}</style>"
)


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"Cannot serialize {type(value).__name__}")


def export_to_csv(data, filename):
    """
    Export data to CSV

    Args:
        data (pandas.DataFrame or list): Data to export
        filename (str): Output filename

    Returns:
        bool: Success status
    """
    try:
        if isinstance(data, pd.DataFrame):
            data.to_csv(filename, index=False)
        else:
            pd.DataFrame(data).to_csv(filename, index=False)
        logger.info(f"Wrote {filename}")
        return True

    except Exception as e:
        logger.error(f"Error exporting data to CSV: {e}")
        return False


def export_to_json(data, filename):
    """
    Export data to JSON with sorted keys

    Args:
        data (dict or list): Data to export
        filename (str): Output filename

    Returns:
        bool: Success status
    """
    try:
        with open(filename, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, sort_keys=True, default=_json_default)
            f.write("\n")
        return True

    except Exception as e:
        logger.error(f"Error exporting data to JSON: {e}")
        return False


def print_table(data, headers=None):
    """
    Print data as a formatted table

    Args:
        data (list or pandas.DataFrame): Rows to print
        headers (list): Column headers ("keys" for DataFrames)
    """
    if isinstance(data, pd.DataFrame):
        data, headers = data.values.tolist(), list(data.columns)
    if headers:
        print(tabulate(data, headers=headers, tablefmt="grid", floatfmt=".4f"))
    else:
        print(tabulate(data, tablefmt="grid", floatfmt=".4f"))


def build_manifest(command, config, seeds, extra=None):
    """
    Everything needed to reproduce a run; holds no timestamps

    Args:
        command (str): Subcommand name
        config (dict): Resolved configuration
        seeds (dict): Seeds used by the run
        extra (dict): Command-specific inputs and outputs

    Returns:
        dict: Manifest content
    """
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "flow_engine": PACKAGE_VERSION,
        },
    }
    if extra:
        manifest.update(extra)
    return manifest


def write_manifest(output_dir, command, config, seeds, extra=None):
    """Write manifest.json into the output directory and return its path"""
    os.makedirs(output_dir, exist_ok=True)
    path = os.path.join(output_dir, "manifest.json")
    export_to_json(build_manifest(command, config, seeds, extra), path)
    return path


def create_run_report(tables, title, output_dir="reports"):
    """
    Create an HTML summary of a run

    Args:
        tables (dict): Section name -> pandas.DataFrame
        title (str): Report title
        output_dir (str): Directory to save the report

    Returns:
        str: Path to the saved report
    """
    try:
        os.makedirs(output_dir, exist_ok=True)
        report_file = os.path.join(output_dir, "report.html")

        html = f"<html><head><title>{title}</title>{REPORT_STYLE}</head><body>"
        html += f"<h1>{title}</h1>"

        for section, frame in tables.items():
            html += f"<h2>{section}</h2>"
            if frame is None or len(frame) == 0:
                html += "<p>No rows.</p>"
                continue
            html += frame.to_html(index=False, float_format=lambda x: f"{x:.4f}", na_rep="")
            if len(frame) > 1 and "epoch" in frame.columns:
                last = frame.iloc[-1]
                html += f"<p>Final epoch {int(last['epoch'])}: validation loss {last['val_loss']:.4f}</p>"

        html += "</body></html>"

        with open(report_file, 'w', encoding='utf-8') as f:
            f.write(html)

        return report_file

    except Exception as e:
        logger.error(f"Error creating run report: {e}")
        return None
