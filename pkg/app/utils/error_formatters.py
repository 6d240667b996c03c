from typing import Any, Dict, List


def transform_validation_errors(errors: Any) -> Dict[str, List[str]]:
    """
    Transform Pydantic validation errors into a field -> messages mapping

    Args:
        errors: List of Pydantic validation error dictionaries

    Returns:
        Dictionary with dotted config paths as keys and error messages as values
    """
    formatted_errors: Dict[str, List[str]] = {}

    for error in errors:
        location = error.get("loc", [])
        field_path = ".".join(str(loc) for loc in location)

        # Use 'non_field_errors' for model-level errors
        field_name = field_path if field_path else "non_field_errors"

        message = error.get("msg", "Invalid value")

        error_type = error.get("type", "")
        ctx = error.get("ctx", {}) or {}
        if error_type == "missing":
            message = "This field is required."
        elif error_type == "extra_forbidden":
            message = "Unknown configuration key."
        elif error_type in ("greater_than", "greater_than_equal"):
            bound = ctx.get("gt", ctx.get("ge", "the lower bound"))
            message = f"Value must be at least {bound}." if error_type == "greater_than_equal" else f"Value must be greater than {bound}."
        elif error_type in ("less_than", "less_than_equal"):
            bound = ctx.get("lt", ctx.get("le", "the upper bound"))
            message = f"Value must be at most {bound}." if error_type == "less_than_equal" else f"Value must be less than {bound}."
        elif error_type == "enum":
            expected = ctx.get("expected", "one of the allowed values")
            message = f"Value must be {expected}."
        elif error_type == "value_error":
            message = error.get("msg", "Invalid value.").removeprefix("Value error, ")
        elif error_type.endswith("_parsing") or error_type.endswith("_type"):
            message = f"Invalid input type: {error.get('msg', 'unexpected value')}."

        formatted_errors.setdefault(field_name, []).append(message)

    return formatted_errors
