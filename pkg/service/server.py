"""
Flask embedding service.
Accepts PNG bytes and returns the image embedding as JSON.
"""

import logging

from flask import Flask, jsonify, request

from core.embeddings import EmbeddingProvider, decode_png
from core.errors import EmptyImageError, ProviderError

logger = logging.getLogger(__name__)


def _request_png() -> bytes:
    """PNG bytes from a raw body or a multipart 'image' field."""
    upload = request.files.get("image")
    if upload is not None:
        return upload.read()
    return request.get_data()


def create_app(provider: EmbeddingProvider):
    """Create and configure the Flask application."""
    app = Flask(__name__)

    @app.route("/embed", methods=["POST"])
    def embed():
        """
        Embedding endpoint.
        Request:  image/png body (or multipart field 'image')
        Response: {"embedding": [...], "dimension": D, "provider": "..."}
        """
        data = _request_png()
        if not data:
            return jsonify({"error": "Request body must contain a PNG image."}), 400

        try:
            image = decode_png(data)
        except (OSError, ValueError) as e:
            return jsonify({"error": f"Cannot decode image: {e}"}), 400

        try:
            vector = provider.embed(image)
        except EmptyImageError as e:
            return jsonify({"error": str(e)}), 400
        except ProviderError as e:
            logger.exception("Embedding failed")
            return jsonify({"error": f"Provider error: {e}"}), 500

        return jsonify({
            "embedding": vector.values.tolist(),
            "dimension": vector.dimension,
            "provider": vector.provider_id,
        })

    @app.route("/health", methods=["GET"])
    def health():
        """Return service status."""
        return jsonify({"status": "ok", "provider": provider.provider_id})

    return app
