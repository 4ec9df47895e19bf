"""Request and response models of the node daemon."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class SpawnRequest(BaseModel):
    program: str = "counter"
    heap_size: int = Field(1 << 20, gt=0)
    max_threads: int = Field(4, ge=1)
    threads: int = Field(1, ge=0)
    fn_id: int = 1
    args: list[int] = []
    steps: int = Field(0, ge=0)
    provider: str = "hw"
    debug: bool = True
    migration_limit: Optional[int] = Field(None, ge=0)
    cache_clear: list[str] = []
    fork_allowed: bool = False
    mks: Optional[str] = None


class RunRequest(BaseModel):
    steps: int = Field(..., gt=0)


class CheckpointRequest(BaseModel):
    out: str
    mks: Optional[str] = None
    fork_allowed: Optional[bool] = None


class RestoreRequest(BaseModel):
    image: str
    mks: Optional[str] = None


class SelfMigrateRequest(BaseModel):
    image: str
    mks: Optional[str] = None


class ThreadInfo(BaseModel):
    hid: int
    state: str
    enclave_idx: Optional[int] = None
    tcs: Optional[int] = None
    steps: int = 0


class EnclaveInfo(BaseModel):
    program: str
    measurement: str
    size: int
    destroyed: bool
    heap_head: Optional[list[int]] = None
    migrations_left: Optional[int] = None


class ProcessInfo(BaseModel):
    pid: int
    alive: bool
    seized: bool
    enclaves: list[EnclaveInfo]
    threads: list[ThreadInfo]
    resources: dict[int, str]


class CheckpointResult(BaseModel):
    pid: int
    image: str
    image_ids: list[str]
    bytes: int
    forked: bool
    timings: dict[str, float]


class RestoreResult(BaseModel):
    process: ProcessInfo
    image_ids: list[str]
    actions: list[str]
    timings: dict[str, float]


class ErrorBody(BaseModel):
    code: str
    message: str
    exit_code: int
