from .flowio import read_flo, write_flo
from .inpaint import InpaintTask, inpaint
from .metrics import flow_errors, flow_to_color, psnr, ssim
from .optical_flow import (FlowTask, bicubic_sample, optical_flow,
                           warp_image, warp_raster)

__all__ = ["InpaintTask", "inpaint", "FlowTask", "optical_flow",
           "warp_image", "warp_raster", "bicubic_sample", "psnr", "ssim",
           "flow_errors", "flow_to_color", "read_flo", "write_flo"]
