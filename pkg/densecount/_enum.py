from enum import Enum


class ParamEnum(str, Enum):
    """String enum for options passed as function or config parameters.

    Use ``Enum.get_value(item)`` to accept either a member or its name and get a
    ``ValueError`` listing the valid options otherwise.
    """

    @classmethod
    def get_value(cls, item):
        """Validate incoming item and return the matching member."""
        if isinstance(item, cls):
            return item
        try:
            return cls(str(item).strip().lower())
        except ValueError:
            valid_options = sorted(e.value for e in cls)
            raise ValueError(
                "'{}' is not a valid option, must be one of '{}'".format(
                    item, "', '".join(valid_options)
                )
            ) from None
