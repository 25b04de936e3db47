#pragma once

#include <optional>

#include "coughvit/audio.hpp"
#include "coughvit/finetune.hpp"
#include "coughvit/mel.hpp"
#include "coughvit/segmentation.hpp"

namespace coughvit {

/// Window scorer backed by a trained classifier. Each window is resampled,
/// turned into a log-mel spectrogram, normalized with the classifier's stats
/// and patchified at its natural length.
inline WindowClassifier window_classifier(Classifier& model, const MelConfig& mel) {
  return [&model, mel](const Waveform& piece) {
    const Waveform w = piece.sample_rate == mel.target_rate ? piece : resample(piece, mel.target_rate);
    MelSpectrogram spec = log_mel_spectrogram(w, mel);
    if (model.stats) spec = normalize(spec, model.stats->mean, model.stats->std);
    return positive_probability(model, patchify(spec, model.config.patch_side, model.config.patch_stride));
  };
}

}  // namespace coughvit
