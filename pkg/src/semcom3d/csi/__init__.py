from .classical import (CsiImage, PilotBlock, amp, amp_estimate, channel_statistics, dft_dictionary, ls_estimate,
                        make_pilots, mmse_estimate, observe_pilots, omp, omp_estimate, soft_threshold)
from .diffusion import Denoiser, NoiseSchedule, forward_diffuse, make_schedule, refine_csi, train_denoiser
from .gan import GanConfig, GanPair, cgan_discriminator_loss, cgan_generator_loss, condition_planes, train_cgan
from .gdce import (ESTIMATORS, ClassicalPrior, CsiDataset, GdceConfig, GdceModel, benchmark, estimate_csi,
                   load_gdce, make_csi_dataset, run_estimator, save_gdce, stacked_nmse_db, train_gdce,
                   write_benchmark_csv)
