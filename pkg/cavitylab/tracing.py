from opentelemetry import trace
from opentelemetry.sdk.resources import SERVICE_NAME, Resource
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import BatchSpanProcessor
from opentelemetry.exporter.otlp.proto.grpc.trace_exporter import OTLPSpanExporter

from .config import DEFAULT_CONFIG

_configured = False

def setup_tracing(service_name: str = "cavitylab", endpoint: str = DEFAULT_CONFIG.otlp_endpoint):
    global _configured
    if _configured:
        return
    resource = Resource(attributes={
        SERVICE_NAME: service_name
    })

    provider = TracerProvider(resource=resource)

    # Export only when a collector endpoint is configured (e.g. Tempo on :4317)
    if endpoint:
        processor = BatchSpanProcessor(OTLPSpanExporter(endpoint=endpoint))
        provider.add_span_processor(processor)

    trace.set_tracer_provider(provider)
    _configured = True

def instrument_span(span, operation_type: str = None, **attributes):
    """Adds the operation type and scalar run parameters to a span."""
    if operation_type:
        span.set_attribute("operation.type", operation_type)
    for key, value in attributes.items():
        if isinstance(value, (bool, int, float, str)):
            span.set_attribute(f"cavitylab.{key}", value)

def get_tracer(name: str):
    return trace.get_tracer(name)
