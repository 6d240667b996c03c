import click
import torch

from app.commands import commands
from app.core.config import settings
from app.core.exceptions import DiffSegException, diffseg_exception_handler, general_exception_handler
from app.core.logger import logger


class DiffSegGroup(click.Group):
    """Command group that turns pipeline exceptions into exit codes"""

    def invoke(self, ctx: click.Context):
        try:
            return super().invoke(ctx)
        except (click.exceptions.Exit, click.ClickException, click.Abort):
            raise
        except DiffSegException as exc:
            ctx.exit(diffseg_exception_handler(exc))
        except Exception as exc:
            ctx.exit(general_exception_handler(exc))


@click.group(cls=DiffSegGroup, help=settings.DESCRIPTION)
@click.version_option(settings.VERSION, prog_name=settings.PROJECT_NAME)
def cli():
    if settings.TORCH_NUM_THREADS:
        torch.set_num_threads(settings.TORCH_NUM_THREADS)
    logger.debug(f"{settings.PROJECT_NAME} {settings.VERSION} ({settings.ENVIRONMENT.value})")


for command in commands:
    cli.add_command(command)


def main():
    cli()


if __name__ == "__main__":
    main()
