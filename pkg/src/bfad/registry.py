"""Critical-function taxonomy: PHP function names grouped into behavior categories."""

from __future__ import annotations

import enum
from collections.abc import Iterator, Mapping
from pathlib import Path
from types import MappingProxyType


class BehaviorCategory(str, enum.Enum):
    PROGRAM_EXECUTION = "ProgramExecution"
    CODE_EXECUTION = "CodeExecution"
    CALLBACK_FUNCTIONS = "CallbackFunctions"
    NETWORK_COMMUNICATION = "NetworkCommunication"
    INFORMATION_GATHERING = "InformationGathering"
    OBFUSCATION_AND_ENCRYPTION = "ObfuscationAndEncryption"

    def __str__(self) -> str:
        return self.value


CATEGORIES: tuple[BehaviorCategory, ...] = tuple(BehaviorCategory)


class RegistryError(ValueError):
    """Malformed registry document. ``line`` is 1-based, or None for file-level errors."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}".strip() if where else message)


_DEFAULT_FUNCTIONS: dict[BehaviorCategory, tuple[str, ...]] = {
    BehaviorCategory.PROGRAM_EXECUTION: (
        "exec", "system", "shell_exec", "passthru", "popen", "proc_open",
        "pcntl_exec",
    ),
    BehaviorCategory.CODE_EXECUTION: (
        "eval", "assert", "preg_replace", "create_function", "mb_ereg_replace",
        "ereg_replace",
    ),
    BehaviorCategory.CALLBACK_FUNCTIONS: (
        "array_map", "register_shutdown_function", "call_user_func",
        "call_user_func_array", "array_filter", "array_walk", "array_reduce",
        "usort", "uasort", "uksort", "preg_replace_callback",
        "register_tick_function", "iterator_apply",
    ),
    BehaviorCategory.NETWORK_COMMUNICATION: (
        "fsockopen", "pfsockopen", "curl_init", "curl_exec", "socket_create",
        "socket_connect", "stream_socket_client", "stream_socket_server",
        "ftp_connect",
    ),
    BehaviorCategory.INFORMATION_GATHERING: (
        "phpinfo", "getenv", "php_uname", "get_current_user", "getmyuid",
        "getmypid", "posix_getpwuid", "posix_uname", "disk_free_space",
        "ini_get",
    ),
    BehaviorCategory.OBFUSCATION_AND_ENCRYPTION: (
        "base64_encode", "base64_decode", "openssl_encrypt", "openssl_decrypt",
        "gzinflate", "gzuncompress", "gzdecode", "str_rot13", "strrev",
        "hex2bin", "convert_uudecode",
    ),
}


class CriticalFunctionRegistry(Mapping[str, BehaviorCategory]):
    """Immutable mapping of lowercase PHP function name to behavior category.

    Lookups are case-insensitive, as PHP function names are.
    """

    def __init__(self, entries: Mapping[str, BehaviorCategory]):
        normalized: dict[str, BehaviorCategory] = {}
        for name, category in entries.items():
            key = name.strip().lower()
            if not key:
                raise RegistryError("empty function name")
            if key in normalized:
                raise RegistryError(f"duplicate function name {key!r}")
            normalized[key] = BehaviorCategory(category)
        self._entries = MappingProxyType(dict(sorted(normalized.items())))

    def lookup(self, name: str) -> BehaviorCategory | None:
        return self._entries.get(name.lower())

    def __getitem__(self, name: str) -> BehaviorCategory:
        return self._entries[name.lower()]

    def __contains__(self, name: object) -> bool:
        return isinstance(name, str) and name.lower() in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other: object) -> bool:
        if isinstance(other, CriticalFunctionRegistry):
            return dict(self._entries) == dict(other._entries)
        return NotImplemented

    def __hash__(self) -> int:
        return hash(tuple(self._entries.items()))

    def __repr__(self) -> str:
        return f"CriticalFunctionRegistry({len(self)} functions)"

    def functions_in(self, category: BehaviorCategory) -> list[str]:
        return [name for name, cat in self._entries.items() if cat is category]

    def dumps(self) -> str:
        """Serialize to the ``name = Category`` line format, grouped by category."""
        lines = []
        for category in CATEGORIES:
            names = self.functions_in(category)
            if not names:
                continue
            lines.append(f"# {category.value}")
            lines.extend(f"{name} = {category.value}" for name in names)
        return "\n".join(lines) + "\n"


def load_default_registry() -> CriticalFunctionRegistry:
    return CriticalFunctionRegistry(
        {name: cat for cat, names in _DEFAULT_FUNCTIONS.items() for name in names}
    )


def parse_registry(text: str, path: str | None = None) -> CriticalFunctionRegistry:
    entries: dict[str, BehaviorCategory] = {}
    seen_at: dict[str, int] = {}
    valid = {c.value: c for c in CATEGORIES}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.count("=") != 1:
            raise RegistryError(f"expected 'function_name = CategoryName', got {raw.strip()!r}", lineno, path)
        name, cat_name = (part.strip() for part in line.split("="))
        if not name or not cat_name:
            raise RegistryError(f"expected 'function_name = CategoryName', got {raw.strip()!r}", lineno, path)
        if not all(ch.isalnum() or ch == "_" for ch in name):
            raise RegistryError(f"invalid function name {name!r}", lineno, path)
        key = name.lower()
        if key in seen_at:
            raise RegistryError(
                f"duplicate function name {key!r} (first defined on line {seen_at[key]})", lineno, path
            )
        if cat_name not in valid:
            raise RegistryError(
                f"unknown category {cat_name!r}; expected one of {', '.join(valid)}", lineno, path
            )
        entries[key] = valid[cat_name]
        seen_at[key] = lineno
    return CriticalFunctionRegistry(entries)


def load_registry_from_file(path: str | Path) -> CriticalFunctionRegistry:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise RegistryError("registry file not found", path=str(path)) from None
    except OSError as exc:
        raise RegistryError(f"cannot read registry file: {exc.strerror}", path=str(path)) from None
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        line = raw[: exc.start].count(b"\n") + 1
        raise RegistryError("registry file is not valid UTF-8", line, str(path)) from None
    return parse_registry(text, str(path))
