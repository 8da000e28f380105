# app/main.py
import logging

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.api import instance_routes, run_routes
from app.core.config import settings

logging.basicConfig(level=settings.log_level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

app = FastAPI(
    title="Shape-Constrained Symbolic Regression",
    description="Genetic programming with interval-certified shape constraints",
    version="0.1.0",
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.cors_origins,
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(instance_routes.router, prefix="/api/instances", tags=["Instances"])
app.include_router(run_routes.router, prefix="/api", tags=["Runs"])


@app.get("/")
def health_check():
    return {"status": "ok"}
