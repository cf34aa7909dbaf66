from fastapi import FastAPI

from api.routers import runs

app = FastAPI(title="Spectrum Trading Records")

# Include routers
app.include_router(runs.router)


@app.get("/")
async def root():
    return {"message": "Spectrum trading simulator API"}
