from dataclasses import dataclass
from app.core.compat import StrEnum
from typing import Generic, TypeVar

R = TypeVar("R", bound=StrEnum)


@dataclass(frozen=True)
class Verdict(Generic[R]):
    """Accept/reject outcome of a protocol rule check. reason is None on accept."""

    reason: R | None = None

    @property
    def accepted(self) -> bool:
        return self.reason is None

    def __bool__(self) -> bool:
        return self.accepted

    def __str__(self) -> str:
        return "accept" if self.reason is None else f"reject({self.reason})"


ACCEPT: Verdict = Verdict()


def reject(reason: R) -> Verdict[R]:
    return Verdict(reason)
