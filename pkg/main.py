from fastapi import FastAPI, Depends, HTTPException, Query, Request
from fastapi.middleware.cors import CORSMiddleware
from contextlib import asynccontextmanager
from pathlib import Path
from typing import List
import asyncio
import logging

from config import settings
from editing import run_edit
from errors import EditError, ShiftEditError, UsageError
from evalreport import LEDGER_FILE, Workspace, heldout_accuracy, load_workspace
from models import (
    EditRequest, EditResponse, EvaluateRequest, EvaluationResponse,
    LedgerPage, TargetInfo,
)
from search import gate, read_ledger

logger = logging.getLogger(__name__)

# Semaphore to limit concurrent edit runs started through the API
_edit_semaphore = asyncio.Semaphore(settings.MAX_PARALLEL_RUNS)


@asynccontextmanager
async def lifespan(app: FastAPI):
    # Startup: load the workspace (generated bench + base checkpoint)
    app.state.workspace = None
    try:
        app.state.workspace = await asyncio.to_thread(
            load_workspace, settings.DATA_DIR, settings.CHECKPOINT_PATH, settings.SPLIT_SEED
        )
        logger.info(f"✅ Workspace loaded: {len(app.state.workspace.splits)} edit targets")
    except (ShiftEditError, OSError) as e:
        detail = e.detail if isinstance(e, ShiftEditError) else str(e)
        logger.warning(f"⚠️ No workspace loaded ({detail}); edit endpoints will return 503")

    yield  # Application is running

    app.state.workspace = None
    logger.info("🛑 Workspace released")


# Initialize FastAPI app
app = FastAPI(
    title=settings.API_TITLE,
    version=settings.API_VERSION,
    description=settings.API_DESCRIPTION,
    lifespan=lifespan
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.CORS_ORIGINS,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


def get_workspace(request: Request) -> Workspace:
    workspace = getattr(request.app.state, "workspace", None)
    if workspace is None:
        raise HTTPException(status_code=503, detail="No workspace loaded (run gen-data and train-base first)")
    return workspace


def _target(workspace: Workspace, name: str):
    try:
        return workspace.target(name)
    except KeyError as e:
        raise HTTPException(status_code=404, detail=str(e.args[0]))


# ============================================
# PUBLIC ENDPOINTS
# ============================================

@app.get("/")
async def root():
    """Service info"""
    return {
        "status": "ok",
        "message": "shiftedit - model updates under distribution shift",
        "version": settings.API_VERSION,
        "features": [
            "Low-rank editing",
            "Surgical finetuning",
            "Full finetuning",
            "Gated evaluation on the original validation set",
            "Run ledger",
        ]
    }


@app.get("/health")
async def health_check(request: Request):
    """Workspace status (unauthenticated, for health checks)."""
    workspace = getattr(request.app.state, "workspace", None)
    return {
        "status": "ok" if workspace is not None else "degraded",
        "version": settings.API_VERSION,
        "services": {
            "workspace": "loaded" if workspace is not None else "missing",
        }
    }


# ============================================
# EDIT ENDPOINTS
# ============================================

@app.get("/targets", response_model=List[TargetInfo])
async def list_targets(workspace: Workspace = Depends(get_workspace)):
    """Edit targets with their 50/50 split sizes."""
    return [
        TargetInfo(name=name, edit_train_size=len(s.edit_train), edit_test_size=len(s.edit_test))
        for name, s in sorted(workspace.splits.items())
    ]


@app.post("/evaluate", response_model=EvaluationResponse)
async def evaluate_target(body: EvaluateRequest, workspace: Workspace = Depends(get_workspace)):
    """Unedited base accuracy on a target's held-out half."""
    splits = _target(workspace, body.target)
    accuracy = await asyncio.to_thread(
        lambda: heldout_accuracy(workspace.base.to_network(), splits.edit_test)
    )
    return EvaluationResponse(target=body.target, heldout_size=len(splits.edit_test), accuracy=accuracy)


@app.post("/edit", response_model=EditResponse)
async def edit_target(body: EditRequest, workspace: Workspace = Depends(get_workspace)):
    """Run one edit plan off the event loop and gate it at every service threshold."""
    splits = _target(workspace, body.target)
    try:
        async with _edit_semaphore:
            outcome = await asyncio.to_thread(
                run_edit, workspace.base, body.plan, splits.edit_train, workspace.original_val,
                splits.edit_test,
            )
    except UsageError as e:
        raise HTTPException(status_code=400, detail=e.detail)
    except EditError as e:
        raise HTTPException(status_code=422, detail=e.detail)

    logger.info(f"✅ API edit {body.plan.label()} on {body.target}: drop {outcome.baseline_drop:.3f}pp")
    return EditResponse(
        target=body.target,
        outcome=outcome.summary(),
        accepted={repr(t): gate(outcome, t) for t in settings.SERVICE_TAUS},
    )


@app.get("/ledger", response_model=LedgerPage)
async def get_ledger(
        page: int = Query(1, ge=1, description="1-based page number"),
        page_size: int = Query(settings.DEFAULT_PAGE_SIZE, ge=1, le=settings.MAX_PAGE_SIZE),
):
    """Paginated view of the merged run ledger in the output directory."""
    path = Path(settings.resolve_out_dir()) / LEDGER_FILE
    entries = await asyncio.to_thread(read_ledger, path)
    start = (page - 1) * page_size
    return LedgerPage(
        entries=entries[start:start + page_size],
        page=page,
        page_size=page_size,
        total=len(entries),
    )


# ============================================
# Development:  python main.py
# Via CLI:      python cli.py serve
# ============================================

if __name__ == "__main__":
    import uvicorn

    uvicorn.run(
        "main:app",
        host="0.0.0.0",
        port=8000,
        reload=False
    )
