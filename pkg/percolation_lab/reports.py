import jinja2

from percolation_lab.paths import template_path

SUMMARY_TEMPLATE = 'run_summary.md.j2'


def render(template: jinja2.Template, variables: dict) -> str:
    """
    Merges the report's variables with the builtin ones and renders the template.
    :param template: a jinja template
    :param variables: what should be rendered into the template
    """
    from percolation_lab import __version__
    base_vars = {
        'LAB_VERSION': __version__,
    }
    return template.render({**base_vars, **variables})


def load_template(filename: str) -> jinja2.Template:
    with open(template_path(filename)) as f:
        return jinja2.Template(f.read(), trim_blocks=True, lstrip_blocks=True)


def write_summary(record, narrative: str | None, path: str) -> str:
    """Renders summary.md for a RunRecord."""
    text = render(load_template(SUMMARY_TEMPLATE), {
        'record': record,
        'config_text': record.config.to_text(),
        'narrative': narrative,
    })
    with open(path, 'w') as f:
        f.write(text)
    return path
