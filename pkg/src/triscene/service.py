"""HTTP session service for interactive outpainting/inpainting.

Sessions wrap a SceneCanvas plus pending proposals. Mutations are serialized
per session and persisted to disk (canvas manifest + tile/proposal triplanes +
a request/seed log), so a session survives restarts and any canvas can be
reproduced by replaying the log. Proposal generation runs on a background
worker pool; clients poll the proposal resource until it is done.
"""

from __future__ import annotations

import io
import json
import tempfile
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse
from PIL import Image

from .checkpoint import load_autoencoder, load_diffusion
from .codec import Triplane
from .manipulation import (BoxRegion, SceneCanvas, inpaint, load_canvas, outpaint,
                           save_canvas, trimask_from_boxes, stitch)
from .scenes import save_scene
from .seeds import derive_seed


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


def _not_found(what: str) -> ApiError:
    return ApiError(404, f"{what}_not_found", f"unknown {what}")


@dataclass
class Proposal:
    id: str
    kind: str  # "outpaint" | "inpaint"
    tile: tuple[int, int]
    seed: int
    status: str = "running"  # running | done | failed | stale
    boxes: list | None = None
    error: str = ""
    triplane: Triplane | None = None

    def summary(self) -> dict:
        return {"proposal_id": self.id, "kind": self.kind, "tile": list(self.tile),
                "seed": self.seed, "status": self.status,
                **({"error": self.error} if self.error else {})}


@dataclass
class Session:
    id: str
    seed: int
    checkpoint: str
    directory: Path
    canvas: SceneCanvas
    revision: int = 0
    proposal_counter: int = 0
    proposals: dict[str, Proposal] = field(default_factory=dict)
    lock: threading.RLock = field(default_factory=threading.RLock)

    def summary(self) -> dict:
        tiles = [{"i": k[0], "j": k[1], "order": n}
                 for n, k in enumerate(self.canvas.commit_order)]
        return {
            "session_id": self.id,
            "revision": self.revision,
            "seed": self.seed,
            "checkpoint": self.checkpoint,
            "tile_dims": list(self.canvas.tile_dims),
            "tiles": tiles,
            "frontier": [list(k) for k in self.canvas.frontier()],
            "proposals": [p.summary() for p in self.proposals.values()
                          if p.status != "stale"],
        }


class SessionStore:
    """Owns the models, the session map and all persistence."""

    def __init__(self, root: Path, resamples: int = 5, jump: int = 20, workers: int = 2):
        self.root = Path(root)
        self.sessions_dir = self.root / "sessions"
        self.sessions_dir.mkdir(parents=True, exist_ok=True)
        ckpt_dir = self.root / "checkpoints"
        self.autoencoder = load_autoencoder(ckpt_dir / "autoencoder.ckpt")
        self.diffusion = load_diffusion(ckpt_dir / "diffusion.ckpt")
        self.resamples = resamples
        self.jump = jump
        self.pool = ThreadPoolExecutor(max_workers=workers)
        self.sessions: dict[str, Session] = {}
        self._load_existing()

    # -- persistence -------------------------------------------------------

    def _session_path(self, sid: str) -> Path:
        return self.sessions_dir / sid

    def _persist(self, session: Session) -> None:
        directory = session.directory
        directory.mkdir(parents=True, exist_ok=True)
        save_canvas(session.canvas, directory / "canvas")
        proposals = []
        for p in session.proposals.values():
            entry = {"id": p.id, "kind": p.kind, "tile": list(p.tile), "seed": p.seed,
                     "status": p.status, "boxes": p.boxes, "error": p.error}
            if p.triplane is not None:
                np.savez(directory / f"proposal_{p.id}.npz", xy=p.triplane.xy,
                         xz=p.triplane.xz, yz=p.triplane.yz,
                         scene_dims=np.array(p.triplane.scene_dims))
                entry["path"] = f"proposal_{p.id}.npz"
            proposals.append(entry)
        state = {"id": session.id, "seed": session.seed, "checkpoint": session.checkpoint,
                 "revision": session.revision, "proposal_counter": session.proposal_counter,
                 "proposals": proposals}
        tmp = directory / "session.json.tmp"
        tmp.write_text(json.dumps(state, indent=2))
        tmp.replace(directory / "session.json")

    def _load_existing(self) -> None:
        for state_file in sorted(self.sessions_dir.glob("*/session.json")):
            state = json.loads(state_file.read_text())
            directory = state_file.parent
            canvas = load_canvas(directory / "canvas")
            session = Session(id=state["id"], seed=state["seed"],
                              checkpoint=state["checkpoint"], directory=directory,
                              canvas=canvas, revision=state["revision"],
                              proposal_counter=state["proposal_counter"])
            for entry in state["proposals"]:
                p = Proposal(id=entry["id"], kind=entry["kind"], tile=tuple(entry["tile"]),
                             seed=entry["seed"], status=entry["status"],
                             boxes=entry.get("boxes"), error=entry.get("error", ""))
                if entry.get("path"):
                    with np.load(directory / entry["path"]) as data:
                        p.triplane = Triplane(data["xy"], data["xz"], data["yz"],
                                              tuple(int(v) for v in data["scene_dims"]))
                elif p.status == "running":
                    p.status = "failed"
                    p.error = "interrupted by service restart"
                session.proposals[p.id] = p
            self.sessions[session.id] = session

    def _log(self, session: Session, record: dict) -> None:
        record = {**record, "revision": session.revision}
        with (session.directory / "log.jsonl").open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    # -- operations ---------------------------------------------------------

    def create_session(self, seed: int, checkpoint: str = "diffusion") -> Session:
        sid = uuid.uuid4().hex[:12]
        model = self.diffusion
        canvas = SceneCanvas(model.scene_dims_, model.layout_.channels,
                             self.autoencoder.downsample)
        root_tp = model.sample(n=1, seed=derive_seed(seed, "root"))[0]
        canvas.commit((0, 0), root_tp)
        session = Session(id=sid, seed=seed, checkpoint=checkpoint,
                          directory=self._session_path(sid), canvas=canvas, revision=1)
        self.sessions[sid] = session
        self._persist(session)
        self._log(session, {"op": "create", "seed": seed, "checkpoint": checkpoint})
        return session

    def get(self, sid: str) -> Session:
        session = self.sessions.get(sid)
        if session is None:
            raise _not_found("session")
        return session

    def _spawn(self, session: Session, proposal: Proposal) -> None:
        def work():
            try:
                if proposal.kind == "outpaint":
                    tp = outpaint(self.diffusion, session.canvas, proposal.tile,
                                  proposal.seed, resamples=self.resamples, jump=self.jump)
                else:
                    base = session.canvas.tiles[proposal.tile]
                    boxes = [BoxRegion(*b) for b in proposal.boxes]
                    mask = trimask_from_boxes(boxes, base.scene_dims,
                                              self.autoencoder.downsample)
                    tp = inpaint(self.diffusion, base, mask, proposal.seed,
                                 resamples=self.resamples, jump=self.jump)
                with session.lock:
                    if proposal.status == "running":
                        proposal.triplane = tp
                        proposal.status = "done"
                        self._persist(session)
            except Exception as err:  # surfaced to the client via status
                with session.lock:
                    proposal.status = "failed"
                    proposal.error = str(err)
                    self._persist(session)
        self.pool.submit(work)

    def request_outpaint(self, session: Session, tile: tuple[int, int],
                         seed: int | None) -> Proposal:
        with session.lock:
            if tile in session.canvas.tiles:
                raise ApiError(409, "tile_committed", f"tile {list(tile)} is already committed")
            if not session.canvas.committed_neighbors(tile):
                raise ApiError(422, "tile_isolated",
                               f"tile {list(tile)} has no committed neighbor")
            session.proposal_counter += 1
            if seed is None:
                seed = derive_seed(session.seed, f"outpaint/{session.proposal_counter}")
            proposal = Proposal(id=f"p{session.proposal_counter:04d}", kind="outpaint",
                                tile=tile, seed=seed)
            session.proposals[proposal.id] = proposal
            session.revision += 1
            self._persist(session)
            self._log(session, {"op": "outpaint", "tile": list(tile), "seed": seed,
                                "proposal_id": proposal.id})
        self._spawn(session, proposal)
        return proposal

    def request_inpaint(self, session: Session, tile: tuple[int, int], boxes: list,
                        seed: int | None) -> Proposal:
        with session.lock:
            if tile not in session.canvas.tiles:
                raise ApiError(409, "tile_not_committed",
                               f"tile {list(tile)} has no committed content to inpaint")
            dims = session.canvas.tile_dims
            try:
                parsed = [BoxRegion(*b).clipped_to(dims) for b in boxes]
            except (TypeError, ValueError) as err:
                raise ApiError(422, "invalid_boxes", str(err)) from err
            if not parsed:
                raise ApiError(422, "invalid_boxes", "need at least one box")
            session.proposal_counter += 1
            if seed is None:
                seed = derive_seed(session.seed, f"inpaint/{session.proposal_counter}")
            proposal = Proposal(id=f"p{session.proposal_counter:04d}", kind="inpaint",
                                tile=tile, seed=seed, boxes=[list(b) for b in boxes])
            session.proposals[proposal.id] = proposal
            session.revision += 1
            self._persist(session)
            self._log(session, {"op": "inpaint", "tile": list(tile), "seed": seed,
                                "boxes": proposal.boxes, "proposal_id": proposal.id})
        self._spawn(session, proposal)
        return proposal

    def get_proposal(self, session: Session, pid: str) -> Proposal:
        proposal = session.proposals.get(pid)
        if proposal is None:
            raise _not_found("proposal")
        return proposal

    def accept(self, session: Session, pid: str) -> dict:
        with session.lock:
            proposal = self.get_proposal(session, pid)
            if proposal.status == "accepted":
                return {"status": "accepted", "tile": list(proposal.tile),
                        "revision": session.revision}
            if proposal.status == "running":
                raise ApiError(409, "proposal_running", "proposal is still generating")
            if proposal.status in ("stale", "failed"):
                raise ApiError(409, f"proposal_{proposal.status}",
                               f"proposal is {proposal.status}")
            if proposal.kind == "outpaint":
                if proposal.tile in session.canvas.tiles:
                    proposal.status = "stale"
                    self._persist(session)
                    raise ApiError(409, "proposal_stale",
                                   "tile was committed by another proposal")
                session.canvas.commit(proposal.tile, proposal.triplane)
            else:
                session.canvas.tiles[proposal.tile] = proposal.triplane
            proposal.status = "accepted"
            for other in session.proposals.values():
                if other.id != pid and other.tile == proposal.tile \
                        and other.status in ("running", "done"):
                    other.status = "stale"
            session.revision += 1
            self._persist(session)
            self._log(session, {"op": "accept", "proposal_id": pid,
                                "tile": list(proposal.tile)})
            return {"status": "accepted", "tile": list(proposal.tile),
                    "revision": session.revision}

    def discard(self, session: Session, pid: str) -> dict:
        with session.lock:
            proposal = self.get_proposal(session, pid)
            if proposal.status == "accepted":
                raise ApiError(409, "proposal_accepted", "accepted proposals cannot be discarded")
            proposal.status = "stale"
            session.revision += 1
            self._persist(session)
            self._log(session, {"op": "discard", "proposal_id": pid})
            return {"status": "discarded", "revision": session.revision}


def _render_png(grid, zmax: int | None = None) -> bytes:
    from .scenes import render_topdown
    if zmax is not None:
        clipped = grid.labels.copy()
        clipped[:, :, zmax + 1:] = 0
        grid = grid.copy_with(clipped)
    img = render_topdown(grid)
    buf = io.BytesIO()
    Image.fromarray(img).save(buf, format="PNG")
    return buf.getvalue()


def create_app(root, resamples: int = 5, jump: int = 20) -> FastAPI:
    """Build the service over a pipeline root containing checkpoints/."""
    store = SessionStore(Path(root), resamples=resamples, jump=jump)
    app = FastAPI(title="triscene session service")
    app.state.store = store

    @app.exception_handler(ApiError)
    async def handle_api_error(_request: Request, err: ApiError):
        return JSONResponse(status_code=err.status,
                            content={"code": err.code, "message": err.message})

    def ready_proposal(session: Session, pid: str) -> Proposal:
        proposal = store.get_proposal(session, pid)
        if proposal.status == "running":
            raise ApiError(409, "proposal_running", "proposal is still generating")
        if proposal.status == "failed":
            raise ApiError(409, "proposal_failed", proposal.error)
        if proposal.triplane is None:
            raise ApiError(409, "proposal_stale", "proposal has no content")
        return proposal

    @app.post("/sessions", status_code=201)
    async def create_session(body: dict):
        seed = int(body.get("seed", 0))
        session = store.create_session(seed, body.get("checkpoint", "diffusion"))
        return {"session_id": session.id, "revision": session.revision,
                "root_tile": [0, 0]}

    @app.get("/sessions/{sid}")
    async def get_session(sid: str):
        return store.get(sid).summary()

    @app.post("/sessions/{sid}/outpaint", status_code=202)
    async def post_outpaint(sid: str, body: dict):
        session = store.get(sid)
        tile = body.get("tile")
        if not isinstance(tile, list) or len(tile) != 2:
            raise ApiError(422, "invalid_tile", "body must carry tile: [i, j]")
        proposal = store.request_outpaint(session, (int(tile[0]), int(tile[1])),
                                          body.get("seed"))
        return {"proposal_id": proposal.id, "status": proposal.status,
                "revision": session.revision}

    @app.post("/sessions/{sid}/inpaint", status_code=202)
    async def post_inpaint(sid: str, body: dict):
        session = store.get(sid)
        tile = body.get("tile")
        if not isinstance(tile, list) or len(tile) != 2:
            raise ApiError(422, "invalid_tile", "body must carry tile: [i, j]")
        boxes = body.get("boxes")
        if not isinstance(boxes, list):
            raise ApiError(422, "invalid_boxes", "body must carry boxes: [[x0,x1,y0,y1,z0,z1]]")
        proposal = store.request_inpaint(session, (int(tile[0]), int(tile[1])), boxes,
                                         body.get("seed"))
        return {"proposal_id": proposal.id, "status": proposal.status,
                "revision": session.revision}

    @app.get("/sessions/{sid}/proposals/{pid}")
    async def get_proposal(sid: str, pid: str):
        session = store.get(sid)
        proposal = store.get_proposal(session, pid)
        return {**proposal.summary(), "revision": session.revision}

    @app.get("/sessions/{sid}/proposals/{pid}/view")
    async def proposal_view(sid: str, pid: str, zmax: int | None = None):
        session = store.get(sid)
        proposal = ready_proposal(session, pid)
        grid = store.autoencoder.decode_grid(proposal.triplane)
        return Response(content=_render_png(grid, zmax), media_type="image/png",
                        headers={"X-Session-Revision": str(session.revision)})

    @app.get("/sessions/{sid}/tiles/{i}/{j}/view")
    async def tile_view(sid: str, i: int, j: int, zmax: int | None = None):
        session = store.get(sid)
        tp = session.canvas.tiles.get((i, j))
        if tp is None:
            raise _not_found("tile")
        grid = store.autoencoder.decode_grid(tp)
        return Response(content=_render_png(grid, zmax), media_type="image/png",
                        headers={"X-Session-Revision": str(session.revision)})

    @app.post("/sessions/{sid}/proposals/{pid}/accept")
    async def accept_proposal(sid: str, pid: str):
        return store.accept(store.get(sid), pid)

    @app.delete("/sessions/{sid}/proposals/{pid}")
    async def discard_proposal(sid: str, pid: str):
        return store.discard(store.get(sid), pid)

    @app.get("/sessions/{sid}/export")
    async def export_session(sid: str):
        session = store.get(sid)
        with session.lock:
            grid = stitch(session.canvas, store.autoencoder)
        with tempfile.NamedTemporaryFile(suffix=".semc") as tmp:
            save_scene(grid, tmp.name)
            data = Path(tmp.name).read_bytes()
        return Response(content=data, media_type="application/octet-stream",
                        headers={"Content-Disposition":
                                 f'attachment; filename="session_{sid}.semc"',
                                 "X-Session-Revision": str(session.revision)})

    @app.get("/palette")
    async def palette():
        ae = store.autoencoder
        return {"class_names": list(ae.class_names_), "palette": ae.palette_.tolist(),
                "tile_dims": list(store.diffusion.scene_dims_)}

    return app
