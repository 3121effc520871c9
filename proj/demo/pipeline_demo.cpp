// Small end-to-end run: synthesize a phantom corpus, train both stages with
// a reduced configuration, then score each test scan against its reference.

#include <chrono>
#include <cstdio>
#include <iostream>

#include "calcscore/evaluation.hpp"
#include "calcscore/phantom.hpp"
#include "calcscore/pipeline.hpp"
#include "calcscore/scoring.hpp"

using namespace calcscore;

int main(int argc, char** argv) {
    const int count = argc > 1 ? std::atoi(argv[1]) : 12;
    const auto t0 = std::chrono::steady_clock::now();

    PipelineConfig cfg;
    cfg.seed = 3;
    cfg.stage1.rf_target = 67;
    cfg.stage1.width = 8;
    cfg.stage1.fusion_width = 32;
    cfg.stage1.patch_size = 79;
    cfg.stage1.batch_size = 32;
    cfg.stage1.micro_batch = 16;
    cfg.stage1.epochs = 4;
    cfg.stage1.steps_per_epoch = 50;
    cfg.stage1.validation_samples = 64;
    cfg.stage2.widths = {8, 16, 16};
    cfg.stage2.dense_width = 64;
    cfg.stage2.batch_size = 32;
    cfg.stage2.epochs = 2;
    cfg.stage2.steps_per_epoch = 40;
    cfg.stage2.validation_samples = 64;

    std::vector<Scan> scans;
    for (const auto& e : plan_corpus(count, cfg.seed, cfg.split)) {
        auto ph = generate(config_for(PhantomConfig{}, e));
        scans.push_back({e.subject, e.split, std::move(ph.ct), std::move(ph.labels)});
    }
    std::printf("corpus: %zu phantoms\n", scans.size());

    auto models = train_pipeline<float>(scans, cfg, [](const EpochRecord& r) {
        std::printf("  %s epoch %d  train %.4f  validation %.4f\n", r.stage.c_str(), r.epoch, r.train_loss,
                    r.validation_loss);
    });

    std::vector<AgreementStats> agreement;
    for (const auto& s : scans) {
        if (s.split != Split::test) continue;
        const auto inf = run_inference(s.ct, *models.cnn1, models.cnn2.get(), cfg);
        const auto pred = score_scan(s.ct, inf.labels, s.subject);
        const auto ref = score_scan(s.ct, s.labels, s.subject);
        agreement.push_back(volume_agreement(inf.labels, s.labels));
        std::printf("\n%s  candidates %zu  stage-1 positives %zu  rejected by stage 2 %zu\n", s.subject.c_str(),
                    inf.candidates.items.size(), inf.stage1_positives, inf.stage2_rejected);
        std::printf("  reference Agatston %8.1f (%s)  predicted %8.1f (%s)  F1 %.3f\n", ref.cac_agatston,
                    to_string(ref.risk).data(), pred.cac_agatston, to_string(pred.risk).data(),
                    agreement.back().f1());
        std::cout << format_table(pred);
    }
    const auto total = summarize(agreement);
    std::printf("\npooled F1 %.3f  sensitivity %.1f%%  FP %.1f mm3  (%.0f s)\n", total.pooled.f1(),
                total.pooled.sensitivity_pct(), total.pooled.fp_mm3,
                std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
}
